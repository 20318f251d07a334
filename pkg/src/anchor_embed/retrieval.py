"""Embedding extraction, exact cosine top-k retrieval and single-gold IR metrics."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .autodiff import DegenerateNormError
from .data import QDPair, pad_sequences
from .model import ModelParams, encode_eos

METRIC_NAMES = ("recall_at_1", "recall_at_10", "mrr", "ndcg_at_10")


def embed_corpus(params: ModelParams, texts: Sequence[Sequence[int]], batch_size: int = 32) -> np.ndarray:
    """Row i is the [EOS] embedding of ``texts[i]`` (token id sequences)."""
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    d = params.config.hidden_dim
    rows = []
    for start in range(0, len(texts), batch_size):
        tokens, mask = pad_sequences(texts[start : start + batch_size], params.config.pad_token_id)
        if tokens.shape[1] == 0:
            tokens = np.zeros((tokens.shape[0], 0), dtype=np.int64)
        rows.append(encode_eos(params, tokens, mask).data)
    if not rows:
        return np.zeros((0, d), dtype=params.dtype)
    return np.concatenate(rows, axis=0)


def _unit_rows(x: np.ndarray, what: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DegenerateNormError(f"degenerate embedding norm in {what}")
    return x / norms


def cosine_matrix(query_embs: np.ndarray, doc_embs: np.ndarray) -> np.ndarray:
    return _unit_rows(query_embs, "queries") @ _unit_rows(doc_embs, "documents").T


def retrieve_topk(query_embs: np.ndarray, doc_embs: np.ndarray, k: int) -> np.ndarray:
    """[Q, k] document ids by descending cosine; ties go to the lower id."""
    n = doc_embs.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"k must satisfy 1 <= k <= {n}, got {k}")
    scores = cosine_matrix(query_embs, doc_embs)
    # stable sort on the negated score keeps ascending ids within ties
    return np.argsort(-scores, axis=1, kind="stable")[:, :k]


@dataclass
class EvalReport:
    recall_at_1: float
    recall_at_10: float
    mrr: float
    ndcg_at_10: float
    label: str = ""
    seed: Optional[int] = None
    corpus: str = ""
    num_queries: int = 0

    def metrics(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def to_dict(self) -> dict:
        return asdict(self)


def gold_ranks(rankings: np.ndarray, gold: Sequence[int], num_docs: Optional[int] = None) -> np.ndarray:
    """1-based rank of each query's gold id; 0 when it is not in the ranked list."""
    rankings = np.asarray(rankings)
    gold = np.asarray(gold, dtype=np.int64)
    if rankings.shape[0] != gold.shape[0]:
        raise ValueError(f"{rankings.shape[0]} rankings but {gold.shape[0]} gold ids")
    n = rankings.shape[1] if num_docs is None else num_docs
    bad = (gold < 0) | (gold >= n)
    if bad.any():
        raise ValueError(f"gold id {int(gold[bad][0])} missing from a collection of {n} documents")
    hit = rankings == gold[:, None]
    return np.where(hit.any(axis=1), hit.argmax(axis=1) + 1, 0)


def compute_metrics(
    rankings: np.ndarray,
    gold: Sequence[int],
    num_docs: Optional[int] = None,
    label: str = "",
    seed: Optional[int] = None,
    corpus: str = "",
) -> EvalReport:
    """Recall@1/10, MRR and NDCG@10 with exactly one relevant document per query.

    ``rankings`` should list every document (k = N) for an exact MRR; a gold
    id absent from a truncated list contributes zero.
    """
    ranks = gold_ranks(rankings, gold, num_docs)
    found = ranks > 0
    rr = np.where(found, 1.0 / np.maximum(ranks, 1), 0.0)
    in10 = found & (ranks <= 10)
    ndcg = np.where(in10, 1.0 / np.log2(np.maximum(ranks, 1) + 1), 0.0)
    return EvalReport(
        recall_at_1=float(np.mean(found & (ranks <= 1))),
        recall_at_10=float(np.mean(in10)),
        mrr=float(np.mean(rr)),
        ndcg_at_10=float(np.mean(ndcg)),
        label=label,
        seed=seed,
        corpus=corpus,
        num_queries=int(len(ranks)),
    )


def evaluate_pairs(
    params: ModelParams,
    pairs: Sequence[QDPair],
    label: str = "",
    seed: Optional[int] = None,
    corpus: str = "",
    batch_size: int = 32,
) -> EvalReport:
    """Rank every pair's document for every pair's query; pair i's document is query i's gold."""
    q = embed_corpus(params, [p.query for p in pairs], batch_size)
    d = embed_corpus(params, [p.document for p in pairs], batch_size)
    rankings = retrieve_topk(q, d, len(pairs))
    return compute_metrics(rankings, np.arange(len(pairs)), label=label, seed=seed, corpus=corpus)


REPORT_FIELDS = ("label", "seed", "corpus", "num_queries") + METRIC_NAMES


def write_reports_csv(reports: Sequence[EvalReport], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(REPORT_FIELDS)
        for r in reports:
            writer.writerow([_cell(getattr(r, f)) for f in REPORT_FIELDS])


def read_reports_csv(path) -> list[EvalReport]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for row in rows:
        out.append(
            EvalReport(
                **{m: float(row[m]) for m in METRIC_NAMES},
                label=row["label"],
                seed=int(row["seed"]) if row["seed"] not in ("", "None") else None,
                corpus=row["corpus"],
                num_queries=int(row["num_queries"]),
            )
        )
    return out


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.6f}"
    return "" if v is None else str(v)


def format_reports(reports: Sequence[EvalReport]) -> str:
    """Fixed-width text table of reports."""
    header = f"{'label':<20} {'seed':>4} " + " ".join(f"{m:>12}" for m in METRIC_NAMES)
    lines = [header, "-" * len(header)]
    for r in reports:
        seed = "" if r.seed is None else str(r.seed)
        lines.append(f"{r.label:<20} {seed:>4} " + " ".join(f"{getattr(r, m):>12.4f}" for m in METRIC_NAMES))
    return "\n".join(lines)


def chance_recall(k: int, n: int) -> float:
    return min(k, n) / n if n else math.nan
