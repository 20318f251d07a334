"""AdamW and the linear-warmup-then-constant learning-rate schedule."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .autodiff import Tensor


def warmup_constant_lr(step: int, base_lr: float, warmup_steps: int) -> float:
    """Learning rate for 0-based ``step``: ramps linearly over ``warmup_steps`` then holds."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, (step + 1) / warmup_steps)


class AdamW:
    def __init__(self, betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.01):
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: Mapping[str, Tensor], lr: float) -> None:
        """Update every tensor in ``params`` in place from its ``.grad`` (missing grad counts as zero).

        Decay applies to matrices only; gains and other vectors are not decayed.
        """
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if name not in self.m:
                self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            data = p.data
            if self.weight_decay and data.ndim >= 2:
                data = data * (1.0 - lr * self.weight_decay)
            p.data = (data - lr * update).astype(p.dtype, copy=False)


def global_grad_norm(params: Mapping[str, Tensor]) -> float:
    total = 0.0
    for p in params.values():
        if p.grad is not None:
            total += float(np.sum(np.square(p.grad, dtype=np.float64)))
    return math.sqrt(total)
