"""Low-rank adapters on projection matrices: effective weight W + s * A @ B."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .autodiff import Tensor
from .model import ModelParams

DEFAULT_TARGETS = ("wq", "wv")


@dataclass
class LowRankAdapter:
    A: Tensor  # [d_in, r]
    B: Tensor  # [r, d_out], zero at attach time
    scale: float

    @property
    def rank(self) -> int:
        return self.A.shape[1]

    def delta(self) -> np.ndarray:
        return self.scale * (self.A.data @ self.B.data)

    def copy(self, dtype=None) -> "LowRankAdapter":
        return LowRankAdapter(
            Tensor(self.A.data.astype(dtype or self.A.dtype, copy=True), requires_grad=self.A.requires_grad),
            Tensor(self.B.data.astype(dtype or self.B.dtype, copy=True), requires_grad=self.B.requires_grad),
            self.scale,
        )


def resolve_targets(params: ModelParams, targets: Sequence[str]) -> list[str]:
    """Expand short projection names ("wq") to every layer's full weight name."""
    names = []
    for target in targets:
        if target in params.tensors:
            names.append(target)
            continue
        matched = [n for n in params.tensors if n.rsplit(".", 1)[-1] == target and params[n].ndim == 2]
        if not matched:
            raise KeyError(f"adapter target {target!r} matches no weight matrix in the model")
        names.extend(matched)
    return names


def attach_adapters(
    params: ModelParams,
    rank: int = 16,
    scale: float = 2.0,
    targets: Sequence[str] = DEFAULT_TARGETS,
    seed: int = 0,
) -> ModelParams:
    """Freeze the base weights and add a trainable (A, B) pair per target matrix.

    Works in place and returns ``params`` for chaining.
    """
    if rank < 1:
        raise ValueError(f"adapter rank must be >= 1, got {rank}")
    if params.adapters:
        raise ValueError("adapters already attached")
    names = resolve_targets(params, targets)
    rng = np.random.default_rng(seed)
    for name in names:
        d_in, d_out = params[name].shape
        if rank > min(d_in, d_out):
            raise ValueError(f"adapter rank {rank} exceeds dimensions {d_in}x{d_out} of {name}")
    for t in params.tensors.values():
        t.requires_grad = False
        t.grad = None
    dtype = params.dtype
    for name in names:
        d_in, d_out = params[name].shape
        A = rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, rank)).astype(dtype)
        params.adapters[name] = LowRankAdapter(
            Tensor(A, requires_grad=True, name=f"adapter.{name}.A"),
            Tensor(np.zeros((rank, d_out), dtype=dtype), requires_grad=True, name=f"adapter.{name}.B"),
            float(scale),
        )
    return params


def merge_adapters(params: ModelParams) -> ModelParams:
    """Return an adapter-free copy whose weights absorb s * A @ B; base weights trainable again."""
    merged = ModelParams(
        params.config,
        {name: Tensor(t.data.copy(), requires_grad=True, name=name) for name, t in params.tensors.items()},
    )
    for name, adapter in params.adapters.items():
        w = merged[name]
        w.data = (w.data + adapter.delta()).astype(w.dtype)
    return merged


def adapter_parameter_count(params: ModelParams, rank: int, targets: Sequence[str] = DEFAULT_TARGETS) -> int:
    """Closed form: sum over target matrices of r * (d_in + d_out)."""
    return int(sum(rank * (params[n].shape[0] + params[n].shape[1]) for n in resolve_targets(params, targets)))
