"""scikit-learn style wrapper: fit on (query, document) pairs, transform texts to embeddings."""

from __future__ import annotations

from typing import Optional

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from .data import QDPair, Tokenizer
from .model import ModelConfig, init_params
from .retrieval import compute_metrics, cosine_matrix, embed_corpus
from .stage1 import Stage1Config, train_stage1
from .stage2 import AdapterConfig, Stage2Config, train_stage2
from .training import scaled_warmup


def check_texts(X, name: str = "X") -> list[str]:
    """A list of non-empty strings, or a clear error."""
    if isinstance(X, str):
        raise TypeError(f"{name} must be a sequence of strings, not a single string")
    try:
        texts = list(X)
    except TypeError:
        raise TypeError(f"{name} must be a sequence of strings") from None
    if not texts:
        raise ValueError(f"{name} is empty")
    for i, t in enumerate(texts):
        if not isinstance(t, str):
            raise TypeError(f"{name}[{i}] is {type(t).__name__}, expected str")
        if not t:
            raise ValueError(f"{name}[{i}] is an empty string")
    return texts


def check_pairs(X, tokenizer: Tokenizer, name: str = "X") -> list[QDPair]:
    """Accept QDPair objects or (query, document[, hard_negatives]) string tuples."""
    if isinstance(X, str):
        raise TypeError(f"{name} must be a sequence of pairs")
    pairs = []
    for i, item in enumerate(X):
        if isinstance(item, QDPair):
            pairs.append(item)
            continue
        if not isinstance(item, (tuple, list)) or len(item) not in (2, 3):
            raise ValueError(f"{name}[{i}] must be (query, document) or (query, document, hard_negatives)")
        query, doc = check_texts([item[0], item[1]], f"{name}[{i}]")
        negs = check_texts(item[2], f"{name}[{i}] hard negatives") if len(item) == 3 and item[2] else []
        pairs.append(QDPair(tokenizer.tokenize(query), tokenizer.tokenize(doc), tuple(tokenizer.tokenize(n) for n in negs)))
    if len(pairs) < 2:
        raise ValueError(f"{name} needs at least 2 pairs, got {len(pairs)}")
    return pairs


class AnchorEmbedder(BaseEstimator, TransformerMixin):
    """Two-stage [EOS] embedder: reconstruction pre-training then contrastive fine-tuning.

    ``fit`` takes (query, document) pairs; ``transform`` maps any list of
    strings over the tokenizer alphabet to an ``[n, hidden_dim]`` array.
    Set ``stage1_steps=0`` for the contrastive-only baseline.
    """

    def __init__(
        self,
        hidden_dim: int = 64,
        num_layers: int = 2,
        num_heads: int = 2,
        ffn_dim: int = 256,
        max_seq_len: int = 48,
        stage1_steps: int = 500,
        stage2_steps: int = 250,
        alpha: float = 0.2,
        tau: float = 0.05,
        learning_rate: float = 1e-3,
        batch_size: int = 32,
        hard_negatives: int = 1,
        adapter_rank: int = 0,
        alphabet: Optional[str] = None,
        random_state: int = 0,
    ):
        self.hidden_dim = hidden_dim
        self.num_layers = num_layers
        self.num_heads = num_heads
        self.ffn_dim = ffn_dim
        self.max_seq_len = max_seq_len
        self.stage1_steps = stage1_steps
        self.stage2_steps = stage2_steps
        self.alpha = alpha
        self.tau = tau
        self.learning_rate = learning_rate
        self.batch_size = batch_size
        self.hard_negatives = hard_negatives
        self.adapter_rank = adapter_rank
        self.alphabet = alphabet
        self.random_state = random_state

    def _tokenizer(self) -> Tokenizer:
        return Tokenizer(self.alphabet) if self.alphabet else Tokenizer()

    def fit(self, X, y=None):
        tok = self._tokenizer()
        pairs = check_pairs(X, tok)
        config = ModelConfig(
            vocab_size=tok.vocab_size,
            hidden_dim=self.hidden_dim,
            num_layers=self.num_layers,
            num_heads=self.num_heads,
            ffn_dim=self.ffn_dim,
            max_seq_len=self.max_seq_len,
        )
        params = init_params(config, self.random_state)
        self.stage1_report_ = self.stage2_report_ = None
        if self.stage1_steps > 0:
            s1 = Stage1Config(
                alpha=self.alpha,
                steps=self.stage1_steps,
                warmup_steps=scaled_warmup(self.stage1_steps),
                learning_rate=self.learning_rate,
                batch_size=self.batch_size,
                seed=self.random_state,
            )
            params, self.stage1_report_ = train_stage1(params, pairs, s1)
        if self.stage2_steps > 0:
            s2 = Stage2Config(
                temperature=self.tau,
                steps=self.stage2_steps,
                learning_rate=self.learning_rate,
                batch_size=self.batch_size,
                seed=self.random_state,
                hard_negatives=self.hard_negatives,
                adapter=AdapterConfig(rank=self.adapter_rank) if self.adapter_rank else None,
            )
            params, self.stage2_report_ = train_stage2(params, pairs, s2)
        self.params_ = params
        self.tokenizer_ = tok
        self.n_features_out_ = config.hidden_dim
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        texts = check_texts(X)
        return embed_corpus(self.params_, [self.tokenizer_.tokenize(t) for t in texts], self.batch_size)

    def score(self, X, y=None) -> float:
        """Recall@1 of each pair's document among all documents in ``X``."""
        check_is_fitted(self, "params_")
        pairs = check_pairs(X, self.tokenizer_)
        q = embed_corpus(self.params_, [p.query for p in pairs], self.batch_size)
        d = embed_corpus(self.params_, [p.document for p in pairs], self.batch_size)
        rankings = np.argsort(-cosine_matrix(q, d), axis=1, kind="stable")
        return compute_metrics(rankings, np.arange(len(pairs))).recall_at_1

    def similarity(self, queries, documents) -> np.ndarray:
        """[n_queries, n_documents] cosine similarities."""
        return cosine_matrix(self.transform(queries), self.transform(documents))
