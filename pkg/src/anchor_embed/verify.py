"""Gradient verification of the training objectives on a small float64 model."""

from __future__ import annotations

from enum import Enum
from typing import Optional

import numpy as np

from .adapters import attach_adapters
from .autodiff.gradcheck import GradCheckReport, check_gradients
from .data import PairBatch, QDPair
from .model import ModelConfig, ModelParams, init_params
from .stage1 import loss_d2q, loss_q2d, stage1_losses
from .stage2 import info_nce

TOY_CONFIG = ModelConfig(vocab_size=32, hidden_dim=16, num_layers=2, num_heads=2, ffn_dim=64, max_seq_len=16)
MAX_CHECK_PARAMETERS = 50_000


class LossKind(str, Enum):
    Q2D = "q2d"
    D2Q = "d2q"
    STAGE1 = "stage1"
    INFONCE = "infonce"


def toy_batch(config: ModelConfig, size: int = 2, seed: int = 0, hard_negatives: int = 1, max_len: int = 6) -> PairBatch:
    """Random ragged pairs over the non-special ids, for finite-difference checks."""
    rng = np.random.default_rng(seed)
    low = max(config.eos_token_id, config.pad_token_id) + 1

    def seq():
        return tuple(int(t) for t in rng.integers(low, config.vocab_size, size=int(rng.integers(2, max_len + 1))))

    pairs = []
    for _ in range(size):
        q, d = seq(), seq()
        negs = []
        while len(negs) < hard_negatives:
            n = seq()
            if n != d:
                negs.append(n)
        pairs.append(QDPair(q, d, tuple(negs)))
    return PairBatch.from_pairs(pairs)


def grad_check(
    params: ModelParams,
    batch: PairBatch,
    loss_kind,
    alpha: float = 0.2,
    tau: float = 0.05,
    samples: int = 32,
    seed: int = 0,
    tolerance: float = 1e-4,
) -> GradCheckReport:
    """Per-group max relative error of backprop against central differences.

    Runs on a float64 copy so the caller's parameters are never perturbed.
    Adapter factors, when attached, are checked as their own groups and the
    frozen base weights are reported as frozen.
    """
    kind = LossKind(loss_kind)
    n = params.num_parameters()
    if n > MAX_CHECK_PARAMETERS:
        raise ValueError(f"model has {n} parameters; finite differencing is limited to {MAX_CHECK_PARAMETERS}")
    work = params.copy(np.float64)

    def loss():
        if kind is LossKind.Q2D:
            return loss_q2d(work, batch)
        if kind is LossKind.D2Q:
            return loss_d2q(work, batch)
        if kind is LossKind.STAGE1:
            return stage1_losses(work, batch, alpha)[0]
        return info_nce(work, batch, tau)

    return check_gradients(loss, dict(work.named_tensors()), samples=samples, seed=seed, tolerance=tolerance)


def run_grad_suite(
    config: Optional[ModelConfig] = None,
    seed: int = 0,
    alpha: float = 0.2,
    tau: float = 0.05,
    adapter_rank: Optional[int] = None,
    samples: int = 32,
) -> dict[str, GradCheckReport]:
    """Check every loss kind on a fresh toy model; InfoNCE optionally through adapters."""
    config = config or TOY_CONFIG
    params = check_point(config, seed)
    batch = toy_batch(config, seed=seed)
    reports = {}
    for kind in LossKind:
        reports[kind.value] = grad_check(params, batch, kind, alpha=alpha, tau=tau, samples=samples, seed=seed)
    if adapter_rank is not None:
        adapted = params.copy()
        attach_adapters(adapted, rank=adapter_rank, seed=seed)
        # B starts at zero; move it off zero so the A factor receives gradient
        rng = np.random.default_rng(seed + 1)
        for adapter in adapted.adapters.values():
            adapter.B.data[...] = rng.normal(0, 0.1, size=adapter.B.shape)
        reports["infonce+adapters"] = grad_check(adapted, batch, LossKind.INFONCE, tau=tau, samples=samples, seed=seed)
    return reports



def check_point(config: ModelConfig, seed: int = 0, std: float = 0.2) -> ModelParams:
    """A float64 model with weights spread well beyond the training init.

    At the training init the attention scores are nearly flat, so query/key
    gradients are around 1e-7 and central differences on an O(1) loss cannot
    resolve them to 1e-4 relative. A wider draw keeps every group well above
    that rounding floor.
    """
    params = init_params(config, seed, dtype=np.float64)
    rng = np.random.default_rng([seed, 1])
    for name, t in params.named_tensors():
        if name.endswith("norm"):
            t.data[...] = rng.uniform(0.5, 1.5, size=t.shape)
        else:
            t.data[...] = rng.normal(0.0, std, size=t.shape)
    return params
