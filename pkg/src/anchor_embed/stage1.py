"""Stage I: bidirectional reconstruction from the [EOS] embedding.

Query-to-document decodes the document from the query's [EOS] embedding,
document-to-query does the reverse, and the two losses are mixed as
``alpha * l_q2d + (1 - alpha) * l_d2q``. The prefix is not detached, so the
reconstruction gradient reaches the encoding pass that produced it.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import PairBatch, QDPair, batch_stream
from .model import ModelParams, decode_with_prefix, encode_eos
from .optim import AdamW, global_grad_norm, warmup_constant_lr
from .training import Stopwatch, TrainReport, check_finite

STAGE1_COLUMNS = ("step", "l_q2d", "l_d2q", "l_stage1", "lr")


@dataclass
class Stage1Config:
    alpha: float = 0.2
    steps: int = 500
    warmup_steps: int = 75
    learning_rate: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.steps < 0 or self.warmup_steps < 0:
            raise ValueError("steps and warmup_steps must be non-negative")
        if self.warmup_steps > self.steps:
            raise ValueError(f"warmup_steps ({self.warmup_steps}) exceeds steps ({self.steps})")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


def reconstruction_targets(tokens: np.ndarray, mask: np.ndarray, eos_id: int, pad_id: int):
    """Teacher-forcing inputs and next-token targets with a trailing [EOS].

    Returns ``(inputs [B, m], input_mask, targets [B, m+1], target_mask)``
    trimmed to the longest row so the padding amount never matters.
    """
    lengths = mask.sum(axis=1)
    m = int(lengths.max())
    inputs = np.where(mask, tokens, pad_id)[:, :m]
    input_mask = mask[:, :m]
    targets = np.full((tokens.shape[0], m + 1), pad_id, dtype=np.int64)
    targets[:, :m] = inputs
    targets[np.arange(tokens.shape[0]), lengths] = eos_id
    target_mask = np.arange(m + 1)[None, :] <= lengths[:, None]
    return inputs, input_mask, targets, target_mask


def reconstruction_loss(params: ModelParams, prefix: Tensor, tokens: np.ndarray, mask: np.ndarray) -> Tensor:
    """Teacher-forced cross-entropy of ``tokens`` (+[EOS]) given the soft prefix."""
    cfg = params.config
    inputs, input_mask, targets, target_mask = reconstruction_targets(tokens, mask, cfg.eos_token_id, cfg.pad_token_id)
    logits = decode_with_prefix(params, prefix, inputs, input_mask)
    return ad.cross_entropy(logits, targets, target_mask)


def loss_q2d(params: ModelParams, batch: PairBatch) -> Tensor:
    e_q = encode_eos(params, batch.query_tokens, batch.query_mask)
    return reconstruction_loss(params, e_q, batch.doc_tokens, batch.doc_mask)


def loss_d2q(params: ModelParams, batch: PairBatch) -> Tensor:
    e_d = encode_eos(params, batch.doc_tokens, batch.doc_mask)
    return reconstruction_loss(params, e_d, batch.query_tokens, batch.query_mask)


def stage1_losses(params: ModelParams, batch: PairBatch, alpha: float) -> tuple[Tensor, Tensor, Tensor]:
    """(mixed, q2d, d2q); each side is encoded once and reused as the other side's target."""
    e_q = encode_eos(params, batch.query_tokens, batch.query_mask)
    e_d = encode_eos(params, batch.doc_tokens, batch.doc_mask)
    l_q2d = reconstruction_loss(params, e_q, batch.doc_tokens, batch.doc_mask)
    l_d2q = reconstruction_loss(params, e_d, batch.query_tokens, batch.query_mask)
    return mix_losses(l_q2d, l_d2q, alpha), l_q2d, l_d2q


def mix_losses(l_q2d: Tensor, l_d2q: Tensor, alpha: float) -> Tensor:
    return ad.scale(l_q2d, alpha) + ad.scale(l_d2q, 1.0 - alpha)


def stage1_step(
    params: ModelParams,
    batch: PairBatch,
    config: Stage1Config,
    optimizer: AdamW,
    step: int,
) -> dict:
    """One AdamW update on the mixed loss; mutates ``params`` and returns the step record."""
    trainable = params.trainable()
    params.zero_grad()
    total, l_q2d, l_d2q = stage1_losses(params, batch, config.alpha)
    ad.backward(total, inputs=trainable.values())
    lr = warmup_constant_lr(step, config.learning_rate, config.warmup_steps)
    record = {"step": step, "l_q2d": l_q2d.item(), "l_d2q": l_d2q.item(), "l_stage1": total.item(), "lr": lr}
    check_finite(
        step,
        {k: record[k] for k in ("l_q2d", "l_d2q", "l_stage1")},
        {"global": global_grad_norm(trainable)},
    )
    optimizer.step(trainable, lr)
    params.zero_grad()
    return record


def train_stage1(
    params: ModelParams,
    corpus: Sequence[QDPair],
    config: Stage1Config,
    log_every: int = 0,
    logger=None,
) -> tuple[ModelParams, TrainReport]:
    """Full-parameter Stage I training on a copy of ``params``."""
    if not corpus:
        raise ValueError("empty corpus")
    params = params.copy()
    if params.adapters:
        raise ValueError("Stage I trains all weights; detach adapters first")
    report = TrainReport(STAGE1_COLUMNS, meta={"stage": 1, "config": config.to_dict()})
    clock = Stopwatch()
    optimizer = AdamW(weight_decay=config.weight_decay)
    batches = batch_stream(corpus, config.batch_size, config.seed, max_hard_negatives=0)
    for step in range(config.steps):
        record = stage1_step(params, next(batches), config, optimizer, step)
        report.log(**record)
        if logger is not None and log_every and (step % log_every == 0 or step == config.steps - 1):
            logger.info("stage1 step %d  l_q2d=%.4f  l_d2q=%.4f  l_stage1=%.4f", step, record["l_q2d"], record["l_d2q"], record["l_stage1"])
    report.meta["wall_clock_s"] = clock.elapsed()
    return params, report

