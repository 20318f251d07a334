"""Minimal reverse-mode automatic differentiation on numpy arrays."""

from .ops import (
    DegenerateNormError,
    EmptyLossSupportError,
    add,
    concat,
    cosine_similarity,
    cross_entropy,
    div,
    embedding,
    exp,
    gelu,
    getitem,
    l2_normalize,
    log,
    log_softmax,
    masked_fill,
    matmul,
    mean,
    mul,
    reshape,
    rms_norm,
    scale,
    silu,
    softmax,
    sqrt,
    sub,
    sum,
    swapaxes,
    transpose,
)
from .tensor import GradTape, Node, ShapeError, Tensor, as_tensor, backward

__all__ = [
    "DegenerateNormError",
    "EmptyLossSupportError",
    "GradTape",
    "Node",
    "ShapeError",
    "Tensor",
    "add",
    "as_tensor",
    "backward",
    "concat",
    "cosine_similarity",
    "cross_entropy",
    "div",
    "embedding",
    "exp",
    "gelu",
    "getitem",
    "l2_normalize",
    "log",
    "log_softmax",
    "masked_fill",
    "matmul",
    "mean",
    "mul",
    "reshape",
    "rms_norm",
    "scale",
    "silu",
    "softmax",
    "sqrt",
    "sub",
    "sum",
    "swapaxes",
    "transpose",
]
