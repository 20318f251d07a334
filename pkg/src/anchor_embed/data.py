"""Character tokenizer, synthetic query/document corpus, JSONL I/O and batching."""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np

PAD_ID = 0
EOS_ID = 1

DEFAULT_ALPHABET = string.ascii_lowercase + string.ascii_uppercase + string.digits

# disjoint symbol pools for the synthetic task
KEY_SYMBOLS = "abcdefghijklmnop"
CIPHER_SYMBOLS = "ABCDEFGHIJKLMNOP"
FILLER_SYMBOLS = "QRSTUVWXYZ0123456789"
QUERY_TEMPLATE = "qr"


class PairFormatError(ValueError):
    """One or more JSONL lines could not be turned into query/document pairs."""

    def __init__(self, path, problems: list[tuple[int, str]]):
        self.path = path
        self.problems = problems
        lines = "; ".join(f"line {n}: {msg}" for n, msg in problems[:20])
        more = f" (+{len(problems) - 20} more)" if len(problems) > 20 else ""
        super().__init__(f"{path}: {lines}{more}")


class Tokenizer:
    """Bijective character <-> id mapping. Ids 0 and 1 are [PAD] and [EOS]."""

    def __init__(self, alphabet: str = DEFAULT_ALPHABET):
        if len(set(alphabet)) != len(alphabet):
            raise ValueError("alphabet has repeated symbols")
        if len(alphabet) > 256:
            raise ValueError("alphabet limited to 256 symbols")
        self.alphabet = alphabet
        self._to_id = {ch: i + 2 for i, ch in enumerate(alphabet)}
        self._to_ch = {i + 2: ch for i, ch in enumerate(alphabet)}

    pad_id = PAD_ID
    eos_id = EOS_ID

    @property
    def vocab_size(self) -> int:
        return len(self.alphabet) + 2

    def tokenize(self, text: str) -> tuple[int, ...]:
        try:
            return tuple(self._to_id[ch] for ch in text)
        except KeyError as exc:
            raise ValueError(f"symbol {exc.args[0]!r} is not in the tokenizer alphabet") from None

    def detokenize(self, ids: Sequence[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i == PAD_ID:
                continue
            if i == EOS_ID:
                break
            out.append(self._to_ch[i])
        return "".join(out)


@dataclass(frozen=True)
class QDPair:
    query: tuple[int, ...]
    document: tuple[int, ...]
    hard_negatives: tuple[tuple[int, ...], ...] = ()
    key: Optional[str] = field(default=None, compare=False)

    def __post_init__(self):
        if not self.query or not self.document:
            raise ValueError("query and document must be non-empty")
        if any(tuple(neg) == tuple(self.document) for neg in self.hard_negatives):
            raise ValueError("negative equals positive")


@dataclass
class SyntheticSpec:
    key_len: tuple[int, int] = (4, 6)
    filler_len: tuple[int, int] = (2, 6)
    cipher_seed: int = 1234
    hard_negatives: int = 1
    distinct_keys: bool = True
    template: str = QUERY_TEMPLATE

    def to_dict(self) -> dict:
        return {
            "key_len": list(self.key_len),
            "filler_len": list(self.filler_len),
            "cipher_seed": self.cipher_seed,
            "hard_negatives": self.hard_negatives,
            "distinct_keys": self.distinct_keys,
            "template": self.template,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SyntheticSpec":
        data = dict(data)
        for k in ("key_len", "filler_len"):
            if k in data:
                data[k] = tuple(data[k])
        return cls(**data)


def make_cipher(seed: int, symbols: str = KEY_SYMBOLS, images: str = CIPHER_SYMBOLS) -> dict[str, str]:
    """Seeded one-to-one substitution from key symbols to cipher symbols."""
    if len(images) < len(symbols):
        raise ValueError("cipher image alphabet smaller than key alphabet")
    perm = np.random.default_rng(seed).permutation(len(images))
    return {s: images[perm[i]] for i, s in enumerate(symbols)}


def generate_synthetic_pairs(
    seed: int,
    count: int,
    spec: Optional[SyntheticSpec] = None,
    tokenizer: Optional[Tokenizer] = None,
) -> list[QDPair]:
    """Key-binding corpus: query = template + key, document = filler + cipher(key) + filler.

    Queries and documents share no symbols, so relevance can only be found
    through the learned substitution. Each hard negative is the document of a
    one-symbol mutation of the key.
    """
    spec = spec or SyntheticSpec()
    tok = tokenizer or Tokenizer()
    for pool in (KEY_SYMBOLS, CIPHER_SYMBOLS, FILLER_SYMBOLS, spec.template):
        missing = set(pool) - set(tok.alphabet)
        if missing:
            raise ValueError(f"tokenizer alphabet lacks symbols {sorted(missing)}")
    lo, hi = spec.key_len
    if spec.distinct_keys and count > sum(len(KEY_SYMBOLS) ** n for n in range(lo, hi + 1)):
        raise ValueError(f"cannot draw {count} distinct keys of length {spec.key_len}")
    cipher = make_cipher(spec.cipher_seed)
    rng = np.random.default_rng(seed)

    def draw(pool: str, n: int) -> str:
        return "".join(pool[i] for i in rng.integers(0, len(pool), size=n))

    def document_for(key: str) -> str:
        left = draw(FILLER_SYMBOLS, int(rng.integers(spec.filler_len[0], spec.filler_len[1] + 1)))
        right = draw(FILLER_SYMBOLS, int(rng.integers(spec.filler_len[0], spec.filler_len[1] + 1)))
        return left + "".join(cipher[c] for c in key) + right

    seen: set[str] = set()
    pairs = []
    while len(pairs) < count:
        key = draw(KEY_SYMBOLS, int(rng.integers(lo, hi + 1)))
        if spec.distinct_keys and key in seen:
            continue
        seen.add(key)
        negatives = []
        for _ in range(spec.hard_negatives):
            pos = int(rng.integers(len(key)))
            shift = int(rng.integers(1, len(KEY_SYMBOLS)))
            sym = KEY_SYMBOLS[(KEY_SYMBOLS.index(key[pos]) + shift) % len(KEY_SYMBOLS)]
            negatives.append(tok.tokenize(document_for(key[:pos] + sym + key[pos + 1 :])))
        pairs.append(
            QDPair(tok.tokenize(spec.template + key), tok.tokenize(document_for(key)), tuple(negatives), key=key)
        )
    return pairs


def cipher_text(key: str, cipher_seed: int) -> str:
    cipher = make_cipher(cipher_seed)
    return "".join(cipher[c] for c in key)


def split_pairs(pairs: Sequence[QDPair], fractions: Sequence[float], seed: int) -> list[list[QDPair]]:
    """Partition by key (pairs sharing a key stay together) into the given fractions."""
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must be non-negative and sum to 1, got {list(fractions)}")
    groups: dict = {}
    for i, p in enumerate(pairs):
        groups.setdefault(p.key if p.key is not None else p.query, []).append(i)
    keys = list(groups)
    order = np.random.default_rng(seed).permutation(len(keys))
    bounds = np.round(np.cumsum([0.0] + list(fractions)) * len(keys)).astype(int)
    parts = []
    for a, b in zip(bounds[:-1], bounds[1:]):
        idx = sorted(i for k in order[a:b] for i in groups[keys[k]])
        parts.append([pairs[i] for i in idx])
    return parts


# -- JSONL -------------------------------------------------------------------


def write_pairs_jsonl(pairs: Sequence[QDPair], path, tokenizer: Optional[Tokenizer] = None) -> None:
    tok = tokenizer or Tokenizer()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for p in pairs:
            rec = {"query": tok.detokenize(p.query), "document": tok.detokenize(p.document)}
            if p.hard_negatives:
                rec["hard_negatives"] = [tok.detokenize(n) for n in p.hard_negatives]
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def load_pairs_jsonl(path, tokenizer: Optional[Tokenizer] = None) -> list[QDPair]:
    tok = tokenizer or Tokenizer()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise PairFormatError(path, [(0, f"unreadable file: {exc}")]) from exc
    pairs, problems = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            if not isinstance(rec, dict):
                raise ValueError("expected a JSON object")
            for name in ("query", "document"):
                if not isinstance(rec.get(name), str):
                    raise ValueError(f"missing required string field {name!r}")
            negs = rec.get("hard_negatives", [])
            if not isinstance(negs, list) or not all(isinstance(n, str) for n in negs):
                raise ValueError("'hard_negatives' must be a list of strings")
            pairs.append(
                QDPair(tok.tokenize(rec["query"]), tok.tokenize(rec["document"]), tuple(tok.tokenize(n) for n in negs))
            )
        except ValueError as exc:
            problems.append((lineno, str(exc)))
    if problems:
        raise PairFormatError(path, problems)
    return pairs


# -- batching ----------------------------------------------------------------


def pad_sequences(seqs: Sequence[Sequence[int]], pad_id: int = PAD_ID, width: Optional[int] = None):
    """Right-pad to a [N, T] matrix; returns (tokens, mask)."""
    T = max((len(s) for s in seqs), default=0) if width is None else width
    tokens = np.full((len(seqs), T), pad_id, dtype=np.int64)
    mask = np.zeros((len(seqs), T), dtype=bool)
    for i, s in enumerate(seqs):
        tokens[i, : len(s)] = s
        mask[i, : len(s)] = True
    return tokens, mask


@dataclass
class PairBatch:
    query_tokens: np.ndarray
    query_mask: np.ndarray
    doc_tokens: np.ndarray
    doc_mask: np.ndarray
    neg_tokens: np.ndarray  # [N_neg, T_neg], negatives of all queries stacked
    neg_mask: np.ndarray
    neg_owner: np.ndarray  # [N_neg] index of the query each negative belongs to

    @property
    def size(self) -> int:
        return self.query_tokens.shape[0]

    @property
    def query_lengths(self) -> np.ndarray:
        return self.query_mask.sum(axis=1)

    @property
    def doc_lengths(self) -> np.ndarray:
        return self.doc_mask.sum(axis=1)

    @classmethod
    def from_pairs(cls, pairs: Sequence[QDPair], max_hard_negatives: Optional[int] = None) -> "PairBatch":
        q, qm = pad_sequences([p.query for p in pairs])
        d, dm = pad_sequences([p.document for p in pairs])
        negs, owner = [], []
        for i, p in enumerate(pairs):
            chosen = p.hard_negatives if max_hard_negatives is None else p.hard_negatives[:max_hard_negatives]
            negs.extend(chosen)
            owner.extend([i] * len(chosen))
        n, nm = pad_sequences(negs)
        return cls(q, qm, d, dm, n, nm, np.asarray(owner, dtype=np.int64))

    def swapped(self) -> "PairBatch":
        """Queries and documents exchanged (negatives dropped)."""
        empty = np.zeros((0, 0), dtype=np.int64)
        return PairBatch(
            self.doc_tokens, self.doc_mask, self.query_tokens, self.query_mask,
            empty, empty.astype(bool), np.zeros(0, dtype=np.int64),
        )

    def unpad(self) -> list[QDPair]:
        def rows(tokens, mask):
            return [tuple(int(x) for x in t[m]) for t, m in zip(tokens, mask)]

        queries = rows(self.query_tokens, self.query_mask)
        docs = rows(self.doc_tokens, self.doc_mask)
        negs = rows(self.neg_tokens, self.neg_mask)
        per = [[] for _ in queries]
        for owner, neg in zip(self.neg_owner, negs):
            per[int(owner)].append(neg)
        return [QDPair(q, d, tuple(n)) for q, d, n in zip(queries, docs, per)]


def epoch_order(n: int, seed: int, epoch: int, shuffle: bool = True) -> np.ndarray:
    if not shuffle:
        return np.arange(n)
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_pairs(
    pairs: Sequence[QDPair],
    batch_size: int,
    seed: int = 0,
    shuffle: bool = True,
    epoch: int = 0,
    drop_last: bool = False,
    max_hard_negatives: Optional[int] = None,
) -> Iterator[PairBatch]:
    """One epoch of padded batches in a per-(seed, epoch) deterministic order."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be positive, got {batch_size}")
    order = epoch_order(len(pairs), seed, epoch, shuffle)
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        if drop_last and len(idx) < batch_size:
            break
        yield PairBatch.from_pairs([pairs[i] for i in idx], max_hard_negatives)


def batch_stream(
    pairs: Sequence[QDPair],
    batch_size: int,
    seed: int,
    max_hard_negatives: Optional[int] = None,
) -> Iterator[PairBatch]:
    """Endless full batches reshuffled every epoch; batch size is capped at the corpus size."""
    if not pairs:
        raise ValueError("empty corpus")
    size = min(batch_size, len(pairs))
    epoch = 0
    while True:
        yield from batch_pairs(pairs, size, seed, True, epoch, drop_last=True, max_hard_negatives=max_hard_negatives)
        epoch += 1
