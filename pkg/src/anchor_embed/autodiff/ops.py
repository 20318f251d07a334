"""Differentiable operations over :class:`Tensor`.

Every op computes its forward value with numpy and, when an input requires
grad, records an exact vector-Jacobian product on the result.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np

from .tensor import ShapeError, Tensor, make_result


class DegenerateNormError(ValueError):
    """A vector with zero norm was passed where a direction is needed."""


class EmptyLossSupportError(ValueError):
    """Every position of a loss was masked out."""


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    return a, b


def unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise arithmetic --------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, "add", (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("sub", a, b)

    def vjp(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, "sub", (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("mul", a, b)

    def vjp(g):
        return unbroadcast(g * b.data, a.shape), unbroadcast(g * a.data, b.shape)

    return make_result(a.data * b.data, "mul", (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape("div", a, b)
    out = a.data / b.data

    def vjp(g):
        return unbroadcast(g / b.data, a.shape), unbroadcast(-g * out / b.data, b.shape)

    return make_result(out, "div", (a, b), vjp)


def scale(a: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def vjp(g):
        return (g * factor,)

    return make_result(a.data * a.dtype.type(factor), "scale", (a,), vjp)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), "log", (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_result(out, "sqrt", (a,), lambda g: (g * 0.5 / out,))


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * sig

    def vjp(g):
        return (g * (sig + a.data * sig * (1.0 - sig)),)

    return make_result(out, "silu", (a,), vjp)


def gelu(a: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    x = a.data
    c = math.sqrt(2.0 / math.pi)
    inner = c * (x + 0.044715 * x**3)
    th = np.tanh(inner)
    out = 0.5 * x * (1.0 + th)

    def vjp(g):
        dinner = c * (1.0 + 3 * 0.044715 * x**2)
        return (g * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th**2) * dinner),)

    return make_result(out, "gelu", (a,), vjp)


# -- reductions --------------------------------------------------------------


def _norm_axes(axis, ndim: int) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.asarray(out), "sum", (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# -- shape manipulation ------------------------------------------------------


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return make_result(out, "reshape", (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    if sorted(ax % a.ndim for ax in axes) != list(range(a.ndim)):
        raise ShapeError("transpose", a.shape, axes)
    inverse = tuple(np.argsort([ax % a.ndim for ax in axes]))
    return make_result(a.data.transpose(axes), "transpose", (a,), lambda g: (g.transpose(inverse),))


def swapaxes(a: Tensor, ax1: int, ax2: int) -> Tensor:
    if a.ndim < 2:
        raise ShapeError("swapaxes", a.shape)
    return make_result(np.swapaxes(a.data, ax1, ax2), "swapaxes", (a,), lambda g: (np.swapaxes(g, ax1, ax2),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat: no tensors given")
    ref = tensors[0]
    ax = axis % ref.ndim
    for t in tensors[1:]:
        if t.ndim != ref.ndim or any(t.shape[i] != ref.shape[i] for i in range(ref.ndim) if i != ax):
            raise ShapeError("concat", ref.shape, t.shape)
    out = np.concatenate([t.data for t in tensors], axis=ax)
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors)))

    return make_result(out, "concat", tensors, vjp)


def getitem(a: Tensor, index) -> Tensor:
    """Basic or advanced indexing; repeated indices accumulate in the backward pass."""
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    try:
        out = a.data[index]
    except IndexError as exc:
        raise ShapeError(f"getitem ({exc})", a.shape) from None

    def vjp(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out, copy=True), "getitem", (a,), vjp)


def embedding(weight: Tensor, ids) -> Tensor:
    """Gather rows of ``weight`` [N x d] for an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if weight.ndim != 2:
        raise ShapeError("embedding", weight.shape, ids.shape)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise ShapeError(f"embedding (id out of range [0, {weight.shape[0]}))", weight.shape, ids.shape)

    def vjp(g):
        full = np.zeros_like(weight.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, weight.shape[1]))
        return (full,)

    return make_result(weight.data[ids], "embedding", (weight,), vjp)


def masked_fill(a: Tensor, mask: np.ndarray, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by a constant; no gradient flows there."""
    mask = np.asarray(mask, dtype=bool)
    try:
        keep = ~np.broadcast_to(mask, a.shape)
    except ValueError:
        raise ShapeError("masked_fill", a.shape, mask.shape) from None
    out = np.where(keep, a.data, a.dtype.type(value))
    return make_result(out, "masked_fill", (a,), lambda g: (g * keep,))


# -- linear algebra ----------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError("matmul", a.shape, b.shape)
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError("matmul", a.shape, b.shape) from None
    out = a.data @ b.data

    def vjp(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, "matmul", (a, b), vjp)


# -- normalisation and probability ------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, "softmax", (a,), vjp)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def vjp(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return make_result(out, "log_softmax", (a,), vjp)


def rms_norm(x: Tensor, gain: Tensor, eps: float = 1e-6) -> Tensor:
    """x / sqrt(mean(x^2) + eps) * gain, normalising over the last axis."""
    if gain.ndim != 1 or gain.shape[0] != x.shape[-1]:
        raise ShapeError("rms_norm", x.shape, gain.shape)
    d = x.shape[-1]
    inv = 1.0 / np.sqrt((x.data**2).mean(axis=-1, keepdims=True) + eps)
    normed = x.data * inv
    out = normed * gain.data

    def vjp(g):
        gx = None
        if x.requires_grad:
            gn = g * gain.data
            gx = inv * (gn - normed * (gn * normed).sum(axis=-1, keepdims=True) / d)
        ggain = unbroadcast(g * normed, gain.shape) if gain.requires_grad else None
        return gx, ggain

    return make_result(out, "rms_norm", (x, gain), vjp)


def cross_entropy(logits: Tensor, targets, mask=None) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under softmax(``logits``).

    For ``logits`` of shape [T, V] this is the mean over unmasked positions.
    For [B, T, V] each row is averaged over its own unmasked positions first,
    then rows are averaged, so the value does not depend on padding length.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim not in (2, 3) or targets.shape != logits.shape[:-1]:
        raise ShapeError("cross_entropy", logits.shape, targets.shape)
    mask = np.ones(targets.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    if mask.shape != targets.shape:
        raise ShapeError("cross_entropy mask", targets.shape, mask.shape)
    if not mask.any():
        raise EmptyLossSupportError("empty loss support")
    V = logits.shape[-1]
    if np.any(targets[mask] < 0) or np.any(targets[mask] >= V):
        raise ShapeError(f"cross_entropy (target id out of range [0, {V}))", logits.shape, targets.shape)

    if logits.ndim == 2:
        weights = mask / mask.sum()
    else:
        counts = mask.sum(axis=1, keepdims=True)
        rows = counts[:, 0] > 0
        if not rows.all():
            raise EmptyLossSupportError("empty loss support")
        weights = mask / counts / mask.shape[0]
    weights = weights.astype(logits.dtype)

    x = logits.data
    shifted = x - x.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    safe_t = np.where(mask, targets, 0)
    picked = np.take_along_axis(logp, safe_t[..., None], axis=-1)[..., 0]
    loss = -(picked * weights).sum()

    def vjp(g):
        probs = np.exp(logp)
        onehot = np.zeros_like(probs)
        np.put_along_axis(onehot, safe_t[..., None], 1.0, axis=-1)
        return (g * (probs - onehot) * weights[..., None],)

    return make_result(np.asarray(loss, dtype=logits.dtype), "cross_entropy", (logits,), vjp)


def l2_normalize(x: Tensor, axis: int = -1) -> Tensor:
    """Scale vectors along ``axis`` to unit length."""
    norm = np.sqrt((x.data**2).sum(axis=axis, keepdims=True))
    if np.any(norm == 0) or not np.all(np.isfinite(norm)):
        raise DegenerateNormError("degenerate embedding norm")
    sq = sum(mul(x, x), axis=axis, keepdims=True)
    return div(x, sqrt(sq))


def cosine_similarity(a: Tensor, b: Tensor, axis: int = -1) -> Tensor:
    """Cosine of the angle between ``a`` and ``b`` along ``axis`` (broadcasting)."""
    a, b = _pair(a, b)
    if a.shape[axis] != b.shape[axis]:
        raise ShapeError("cosine_similarity", a.shape, b.shape)
    return sum(mul(l2_normalize(a, axis), l2_normalize(b, axis)), axis=axis)
