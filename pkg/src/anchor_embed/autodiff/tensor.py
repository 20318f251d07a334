"""Dense tensors with a reverse-mode gradient tape, backed by numpy."""

from __future__ import annotations

import logging
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

logger = logging.getLogger(__name__)

VJP = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class ShapeError(ValueError):
    """Operand shapes do not conform for an operation."""

    def __init__(self, op: str, *shapes: tuple):
        self.op = op
        self.shapes = shapes
        shown = " and ".join(str(tuple(s)) for s in shapes)
        super().__init__(f"{op}: incompatible shapes {shown}")


class Node:
    """One executed differentiable operation: its inputs and its vector-Jacobian rule."""

    __slots__ = ("op", "inputs", "vjp")

    def __init__(self, op: str, inputs: Sequence["Tensor"], vjp: VJP):
        self.op = op
        self.inputs = tuple(inputs)
        self.vjp = vjp


class Tensor:
    """An n-dimensional real array that can take part in backpropagation.

    Leaves created by the user carry ``requires_grad``; results of operations
    on them carry a :class:`Node` describing how to push gradients back.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "name", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: Optional[str] = None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError("item", self.shape)
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operator sugar; implementations live in ops.py -------------------
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops

        return ops.div(self, other)

    def __neg__(self):
        from . import ops

        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops

        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops

        return ops.getitem(self, index)

    def sum(self, axis=None, keepdims: bool = False):
        from . import ops

        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        from . import ops

        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops

        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        from . import ops

        return ops.swapaxes(self, -1, -2)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def make_result(data: np.ndarray, op: str, inputs: Sequence[Tensor], vjp: VJP) -> Tensor:
    """Wrap an op's forward value, recording it for backprop when any input needs grad."""
    out = Tensor(data, dtype=data.dtype)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = Node(op, inputs, vjp)
    return out


class GradTape:
    """The differentiable operations that produced a tensor, in execution order.

    Built by walking the graph behind ``output``; ``backward`` replays the
    entries in reverse, so each operation is visited exactly once.
    """

    def __init__(self, output: Tensor):
        self.output = output
        self.entries: list[Tensor] = []
        seen: set[int] = set()
        # iterative post-order DFS; recursion would overflow on long graphs
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if t.node is None:
                continue
            if expanded:
                self.entries.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for parent in t.node.inputs:
                if parent.node is not None and id(parent) not in seen:
                    stack.append((parent, False))

    def __len__(self) -> int:
        return len(self.entries)

    def ops(self) -> list[str]:
        return [t.node.op for t in self.entries]

    def backward(self, seed: Optional[np.ndarray] = None) -> None:
        out = self.output
        if seed is None:
            seed = np.ones_like(out.data)
        pending: dict[int, np.ndarray] = {id(out): np.asarray(seed, dtype=out.dtype)}
        for t in reversed(self.entries):
            g = pending.pop(id(t), None)
            if g is None:
                continue
            grads = t.node.vjp(g)
            for parent, pg in zip(t.node.inputs, grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.shape:
                    raise ShapeError(f"backward[{t.node.op}]", pg.shape, parent.shape)
                if parent.node is None:
                    _accumulate(parent, pg)
                else:
                    key = id(parent)
                    if key in pending:
                        pending[key] = pending[key] + pg
                    else:
                        pending[key] = pg
        if out.node is None and out.requires_grad:
            _accumulate(out, seed)

    def clear(self) -> None:
        """Drop every recorded node so intermediates can be freed."""
        for t in self.entries:
            if t is not self.output:
                t.requires_grad = False
            t.node = None
        self.entries = []


def _accumulate(leaf: Tensor, g: np.ndarray) -> None:
    g = g.astype(leaf.dtype, copy=False)
    if leaf.grad is None:
        leaf.grad = g.copy()
    else:
        leaf.grad = leaf.grad + g


def backward(loss: Tensor, inputs: Optional[Iterable[Tensor]] = None, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    ``inputs`` lists leaves that must end up with a gradient array even when
    the loss does not depend on them (they receive zeros).
    """
    if loss.data.size != 1:
        raise ShapeError("backward (loss must be scalar)", loss.shape)
    tape = GradTape(loss)
    tape.backward()
    if not retain_graph:
        tape.clear()
    for leaf in inputs or ():
        if leaf.requires_grad and leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
