"""Central finite-difference verification of analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tensor, backward


class NonFiniteLossError(ValueError):
    pass


@dataclass
class GroupResult:
    name: str
    max_rel_error: float
    coords_checked: int
    frozen: bool = False
    max_abs_grad: float = 0.0


@dataclass
class GradCheckReport:
    groups: list[GroupResult] = field(default_factory=list)
    tolerance: float = 1e-4

    @property
    def max_rel_error(self) -> float:
        checked = [g.max_rel_error for g in self.groups if not g.frozen]
        return max(checked) if checked else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def format(self) -> str:
        lines = [f"{'group':<28} {'coords':>6} {'max rel err':>12}"]
        for g in self.groups:
            err = "frozen" if g.frozen else f"{g.max_rel_error:.3e}"
            lines.append(f"{g.name:<28} {g.coords_checked:>6} {err:>12}")
        lines.append(f"overall max rel err {self.max_rel_error:.3e} -> {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


def fd_step(w: float) -> float:
    """Scale-aware central-difference step."""
    return max(1e-5, 1e-4 * abs(w))


def relative_error(analytic: float, numeric: float, floor: float = 1e-8) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps exact zeros from dividing by zero."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    samples: int = 32,
    seed: int = 0,
    tolerance: float = 1e-4,
    floor: float = 1e-8,
) -> GradCheckReport:
    """Compare backprop gradients with central differences on sampled coordinates.

    ``loss_fn`` must rebuild the loss from the current contents of ``params``.
    Tensors with ``requires_grad`` false are reported as frozen: their analytic
    gradient is zero by construction and they are not compared.
    """
    for t in params.values():
        t.grad = None
    loss = loss_fn()
    if not np.isfinite(loss.data).all():
        raise NonFiniteLossError(f"non-finite loss {loss.data}")
    backward(loss, inputs=[t for t in params.values() if t.requires_grad])
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in params.items()}

    rng = np.random.default_rng(seed)
    report = GradCheckReport(tolerance=tolerance)
    for name, t in params.items():
        if not t.requires_grad:
            report.groups.append(GroupResult(name, 0.0, 0, frozen=True))
            continue
        flat = t.data.reshape(-1)
        n = flat.size
        idx = np.arange(n) if n <= samples else rng.choice(n, size=samples, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            h = fd_step(float(orig))
            flat[i] = orig + h
            f_plus = float(loss_fn().data)
            flat[i] = orig - h
            f_minus = float(loss_fn().data)
            flat[i] = orig
            if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
                raise NonFiniteLossError(f"non-finite loss while perturbing {name}[{i}]")
            numeric = (f_plus - f_minus) / (2 * h)
            worst = max(worst, relative_error(float(analytic[name].reshape(-1)[i]), numeric, floor))
        report.groups.append(
            GroupResult(name, worst, len(idx), max_abs_grad=float(np.abs(analytic[name]).max(initial=0.0)))
        )
    for t in params.values():
        t.grad = None
    return report
