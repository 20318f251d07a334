"""Stage II: contrastive fine-tuning of the [EOS] embedding with InfoNCE.

Each query is scored against every in-batch positive document and against
its own hard negatives; the similarity is cosine divided by a temperature.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .adapters import DEFAULT_TARGETS, attach_adapters, merge_adapters
from .autodiff import Tensor
from .data import PairBatch, QDPair, batch_stream
from .model import ModelParams, encode_eos
from .optim import AdamW, global_grad_norm, warmup_constant_lr
from .training import Stopwatch, TrainReport, check_finite

STAGE2_COLUMNS = ("step", "info_nce", "lr")


class NoNegativesError(ValueError):
    pass


@dataclass
class AdapterConfig:
    rank: int = 16
    scale: float = 2.0
    targets: tuple[str, ...] = DEFAULT_TARGETS

    def __post_init__(self):
        if self.rank < 1:
            raise ValueError(f"adapter rank must be >= 1, got {self.rank}")
        self.targets = tuple(self.targets)

    def to_dict(self) -> dict:
        return {"rank": self.rank, "scale": self.scale, "targets": list(self.targets)}


@dataclass
class Stage2Config:
    temperature: float = 0.05
    steps: int = 250
    warmup_steps: int = 0
    learning_rate: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    hard_negatives: int = 1
    weight_decay: float = 0.01
    adapter: Optional[AdapterConfig] = None

    def __post_init__(self):
        if not self.temperature > 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if self.steps < 0 or self.warmup_steps < 0 or self.warmup_steps > max(self.steps, 0):
            raise ValueError("need 0 <= warmup_steps <= steps")
        if isinstance(self.adapter, dict):
            self.adapter = AdapterConfig(**self.adapter)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["adapter"] = self.adapter.to_dict() if self.adapter else None
        return out


def sim(e_q: Tensor, e_d: Tensor, tau: float) -> Tensor:
    """Temperature-scaled cosine similarity (broadcasts over leading axes)."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return ad.scale(ad.cosine_similarity(e_q, e_d), 1.0 / tau)


def candidate_mask(batch: PairBatch) -> np.ndarray:
    """[B, B + N_neg] boolean: which documents score against which query.

    In-batch documents identical to a query's own positive (other than the
    positive itself) are dropped; a hard negative only counts for its owner.
    """
    B = batch.size
    docs = [tuple(t[m]) for t, m in zip(batch.doc_tokens, batch.doc_mask)]
    in_batch = np.ones((B, B), dtype=bool)
    for i in range(B):
        for j in range(B):
            if i != j and docs[i] == docs[j]:
                in_batch[i, j] = False
    hard = batch.neg_owner[None, :] == np.arange(B)[:, None]
    return np.concatenate([in_batch, hard], axis=1)


def similarity_logits(q_emb: Tensor, cand_emb: Tensor, tau: float) -> Tensor:
    """[B, N] matrix of cos(q_i, c_j) / tau."""
    qn = ad.l2_normalize(q_emb)
    cn = ad.l2_normalize(cand_emb)
    return ad.scale(qn @ ad.swapaxes(cn, -1, -2), 1.0 / tau)


def info_nce_from_embeddings(
    q_emb: Tensor, doc_emb: Tensor, tau: float, neg_emb: Optional[Tensor] = None, allowed: Optional[np.ndarray] = None
) -> Tensor:
    """Mean over queries of -log softmax at the query's own positive (column i)."""
    B = q_emb.shape[0]
    cands = doc_emb if neg_emb is None or neg_emb.shape[0] == 0 else ad.concat([doc_emb, neg_emb], axis=0)
    if allowed is None:
        allowed = np.ones((B, cands.shape[0]), dtype=bool)
    allowed = allowed.copy()
    allowed[np.arange(B), np.arange(B)] = True
    if (allowed.sum(axis=1) < 2).any():
        raise NoNegativesError("empty negative set: InfoNCE needs batch_size >= 2 or hard negatives")
    logits = ad.masked_fill(similarity_logits(q_emb, cands, tau), ~allowed, -np.inf)
    return ad.cross_entropy(logits, np.arange(B))


def info_nce(params: ModelParams, batch: PairBatch, tau: float) -> Tensor:
    q = encode_eos(params, batch.query_tokens, batch.query_mask)
    d = encode_eos(params, batch.doc_tokens, batch.doc_mask)
    n = encode_eos(params, batch.neg_tokens, batch.neg_mask) if batch.neg_tokens.shape[0] else None
    return info_nce_from_embeddings(q, d, tau, n, candidate_mask(batch))


def stage2_step(params: ModelParams, batch: PairBatch, config: Stage2Config, optimizer: AdamW, step: int) -> dict:
    trainable = params.trainable()
    params.zero_grad()
    loss = info_nce(params, batch, config.temperature)
    ad.backward(loss, inputs=trainable.values())
    lr = warmup_constant_lr(step, config.learning_rate, config.warmup_steps)
    record = {"step": step, "info_nce": loss.item(), "lr": lr}
    check_finite(step, {"info_nce": record["info_nce"]}, {"global": global_grad_norm(trainable)})
    optimizer.step(trainable, lr)
    params.zero_grad()
    return record


def train_stage2(
    params: ModelParams,
    corpus: Sequence[QDPair],
    config: Stage2Config,
    log_every: int = 0,
    logger=None,
) -> tuple[ModelParams, TrainReport]:
    """Contrastive training on a copy of ``params``; adapters, if configured, are merged at the end."""
    if not corpus:
        raise ValueError("empty corpus")
    if min(config.batch_size, len(corpus)) < 2 and config.hard_negatives < 1:
        raise NoNegativesError("contrastive training needs batch_size >= 2 or hard negatives")
    params = params.copy()
    if config.adapter is not None:
        a = config.adapter
        attach_adapters(params, rank=a.rank, scale=a.scale, targets=a.targets, seed=config.seed)
    report = TrainReport(STAGE2_COLUMNS, meta={"stage": 2, "config": config.to_dict()})
    clock = Stopwatch()
    optimizer = AdamW(weight_decay=config.weight_decay)
    batches = batch_stream(corpus, config.batch_size, config.seed, max_hard_negatives=config.hard_negatives)
    for step in range(config.steps):
        record = stage2_step(params, next(batches), config, optimizer, step)
        report.log(**record)
        if logger is not None and log_every and (step % log_every == 0 or step == config.steps - 1):
            logger.info("stage2 step %d  info_nce=%.4f", step, record["info_nce"])
    report.meta["wall_clock_s"] = clock.elapsed()
    if params.adapters:
        params = merge_adapters(params)
    return params, report
