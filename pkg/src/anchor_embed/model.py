"""Micro decoder-only transformer with [EOS] pooling and soft-prefix decoding.

Weights are stored as ``[d_in, d_out]`` so a projection is ``x @ W``.
"""

from __future__ import annotations

import io
import json
import math
import os
import struct
import tempfile
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

NEG_INF = -np.inf


class SequenceTooLongError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class ModelConfig:
    vocab_size: int = 64
    hidden_dim: int = 64
    num_layers: int = 2
    num_heads: int = 2
    ffn_dim: int = 256
    max_seq_len: int = 48
    eos_token_id: int = 1
    pad_token_id: int = 0
    norm_eps: float = 1e-6

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        for name in ("vocab_size", "hidden_dim", "num_layers", "num_heads", "ffn_dim", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.hidden_dim % self.num_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by num_heads {self.num_heads}")
        if self.eos_token_id == self.pad_token_id:
            raise ValueError("eos_token_id and pad_token_id must differ")
        for name in ("eos_token_id", "pad_token_id"):
            tid = getattr(self, name)
            if not 0 <= tid < self.vocab_size:
                raise ValueError(f"{name}={tid} outside vocabulary of size {self.vocab_size}")

    @property
    def head_dim(self) -> int:
        return self.hidden_dim // self.num_heads

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown model config fields: {sorted(unknown)}")
        return cls(**data)


def parameter_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every weight of the architecture, in canonical order."""
    d, V, f = config.hidden_dim, config.vocab_size, config.ffn_dim
    shapes: dict[str, tuple[int, ...]] = {
        "tok_emb": (V, d),
        "pos_emb": (config.max_seq_len, d),
    }
    for i in range(config.num_layers):
        p = f"layers.{i}."
        shapes[p + "attn_norm"] = (d,)
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[p + proj] = (d, d)
        shapes[p + "mlp_norm"] = (d,)
        shapes[p + "w_up"] = (d, f)
        shapes[p + "w_down"] = (f, d)
    shapes["final_norm"] = (d,)
    shapes["lm_head"] = (d, V)
    return shapes


class ModelParams:
    """All trainable tensors of a model plus any attached low-rank adapters."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = parameter_shapes(config)
        if list(tensors) != list(expected):
            missing = set(expected) - set(tensors)
            extra = set(tensors) - set(expected)
            if missing or extra:
                raise ValueError(f"parameter names mismatch: missing={sorted(missing)} extra={sorted(extra)}")
            tensors = {name: tensors[name] for name in expected}
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ShapeError(f"param {name}", tensors[name].shape, shape)
        self.config = config
        self.tensors = tensors
        self.adapters: dict = {}

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors)

    def named_tensors(self):
        """Base weights followed by adapter factors."""
        yield from self.tensors.items()
        for target, adapter in self.adapters.items():
            yield f"adapter.{target}.A", adapter.A
            yield f"adapter.{target}.B", adapter.B

    def trainable(self) -> dict[str, Tensor]:
        return {name: t for name, t in self.named_tensors() if t.requires_grad}

    def num_parameters(self, trainable_only: bool = False) -> int:
        return int(sum(t.size for _, t in self.named_tensors() if t.requires_grad or not trainable_only))

    @property
    def dtype(self):
        return self.tensors["tok_emb"].dtype

    def zero_grad(self) -> None:
        for _, t in self.named_tensors():
            t.grad = None

    def copy(self, dtype=None) -> "ModelParams":
        """Deep copy; ``dtype`` optionally casts every tensor."""
        new = ModelParams(
            self.config,
            {
                name: Tensor(t.data.astype(dtype or t.dtype, copy=True), requires_grad=t.requires_grad, name=name)
                for name, t in self.tensors.items()
            },
        )
        for target, adapter in self.adapters.items():
            new.adapters[target] = adapter.copy(dtype)
        return new

    def state(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_tensors()}

    def equal(self, other: "ModelParams") -> bool:
        mine, theirs = self.state(), other.state()
        return mine.keys() == theirs.keys() and all(np.array_equal(mine[k], theirs[k]) for k in mine)


def count_parameters(config: ModelConfig) -> int:
    return int(sum(math.prod(s) for s in parameter_shapes(config).values()))


POSITION_INIT_FACTOR = 0.1


def init_params(config: ModelConfig, seed: int, dtype=np.float32) -> ModelParams:
    """Normal(0, 0.02) weights; residual output projections shrunk by 1/sqrt(2L); unit norm gains.

    The positional table starts at a tenth of the base scale: otherwise the
    [EOS] state of a fresh model is mostly "which position am I", and
    sequences of different length already look far apart before training.
    """
    rng = np.random.default_rng(seed)
    out_std = 0.02 / math.sqrt(2 * config.num_layers)
    tensors = {}
    for name, shape in parameter_shapes(config).items():
        if name.endswith("norm"):
            data = np.ones(shape)
        elif name == "pos_emb":
            data = rng.normal(0.0, 0.02 * POSITION_INIT_FACTOR, size=shape)
        elif name.endswith(("wo", "w_down")):
            data = rng.normal(0.0, out_std, size=shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True, name=name)
    return ModelParams(config, tensors)


# -- forward pass ------------------------------------------------------------


def _project(params: ModelParams, name: str, x: Tensor) -> Tensor:
    out = x @ params[name]
    adapter = params.adapters.get(name)
    if adapter is not None:
        out = out + ad.scale((x @ adapter.A) @ adapter.B, adapter.scale)
    return out


def _check_length(config: ModelConfig, T: int) -> None:
    if T > config.max_seq_len:
        raise SequenceTooLongError(f"sequence length T={T} exceeds max_seq_len={config.max_seq_len}")


def _attention(params: ModelParams, prefix: str, x: Tensor, allowed: np.ndarray) -> Tensor:
    cfg = params.config
    B, T, d = x.shape
    h, dh = cfg.num_heads, cfg.head_dim

    def heads(t: Tensor) -> Tensor:
        return ad.transpose(ad.reshape(t, (B, T, h, dh)), (0, 2, 1, 3))

    q = heads(_project(params, prefix + "wq", x))
    k = heads(_project(params, prefix + "wk", x))
    v = heads(_project(params, prefix + "wv", x))
    scores = ad.scale(q @ ad.swapaxes(k, -1, -2), 1.0 / math.sqrt(dh))
    scores = ad.masked_fill(scores, ~allowed, NEG_INF)
    att = ad.softmax(scores, axis=-1)
    ctx = ad.reshape(ad.transpose(att @ v, (0, 2, 1, 3)), (B, T, d))
    return _project(params, prefix + "wo", ctx)


def attention_mask(key_mask: np.ndarray) -> np.ndarray:
    """[B, 1, T, T] boolean: query t may attend key s iff s <= t and s is not padding.

    The diagonal is always allowed so padded query rows stay finite; with
    right padding those rows never feed a real position.
    """
    T = key_mask.shape[1]
    causal = np.tril(np.ones((T, T), dtype=bool))
    allowed = causal[None, :, :] & key_mask[:, None, :]
    allowed |= np.eye(T, dtype=bool)[None]
    return allowed[:, None, :, :]


def _run_blocks(params: ModelParams, x: Tensor, key_mask: np.ndarray) -> Tensor:
    cfg = params.config
    allowed = attention_mask(key_mask)
    for i in range(cfg.num_layers):
        p = f"layers.{i}."
        x = x + _attention(params, p, ad.rms_norm(x, params[p + "attn_norm"], cfg.norm_eps), allowed)
        hmid = ad.silu(_project(params, p + "w_up", ad.rms_norm(x, params[p + "mlp_norm"], cfg.norm_eps)))
        x = x + _project(params, p + "w_down", hmid)
    return ad.rms_norm(x, params["final_norm"], cfg.norm_eps)


def _as_batch(tokens) -> np.ndarray:
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim == 1:
        tokens = tokens[None, :]
    if tokens.ndim != 2:
        raise ShapeError("tokens", tokens.shape)
    return tokens


def _check_ids(config: ModelConfig, tokens: np.ndarray) -> None:
    if tokens.size and (tokens.min() < 0 or tokens.max() >= config.vocab_size):
        raise ValueError(f"token ids must lie in [0, {config.vocab_size})")


def forward_hidden(params: ModelParams, tokens, mask=None) -> Tensor:
    """Final-norm hidden states [B, T, d] for a right-padded token batch."""
    tokens = _as_batch(tokens)
    cfg = params.config
    B, T = tokens.shape
    _check_length(cfg, T)
    _check_ids(cfg, tokens)
    mask = tokens != cfg.pad_token_id if mask is None else np.asarray(mask, dtype=bool).reshape(B, T)
    x = ad.embedding(params["tok_emb"], tokens) + params["pos_emb"][:T]
    return _run_blocks(params, x, mask)


def append_eos(config: ModelConfig, tokens, mask=None) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Insert [EOS] right after each sequence's last real token.

    Returns the widened token matrix, its mask, and the per-row [EOS] index.
    """
    tokens = _as_batch(tokens)
    B, T = tokens.shape
    mask = tokens != config.pad_token_id if mask is None else np.asarray(mask, dtype=bool).reshape(B, T)
    lengths = mask.sum(axis=1)
    out = np.full((B, T + 1), config.pad_token_id, dtype=np.int64)
    out[:, :T] = np.where(mask, tokens, config.pad_token_id)
    out[np.arange(B), lengths] = config.eos_token_id
    return out, np.arange(T + 1)[None, :] <= lengths[:, None], lengths


def encode_eos(params: ModelParams, tokens, mask=None) -> Tensor:
    """[B, d] embeddings: the final hidden state at each sequence's appended [EOS]."""
    cfg = params.config
    with_eos, eos_mask, lengths = append_eos(cfg, tokens, mask)
    # trim trailing all-pad columns so the padding amount never reaches the math
    width = int(lengths.max()) + 1
    hidden = forward_hidden(params, with_eos[:, :width], eos_mask[:, :width])
    return hidden[np.arange(with_eos.shape[0]), lengths]


def decode_with_prefix(params: ModelParams, prefix: Tensor, target, mask=None) -> Tensor:
    """Teacher-forced logits with a soft prefix vector at position 0.

    ``prefix`` is [B, d] (or [d]); ``target`` is [B, m] (or [m]). Row 0 of the
    input is the prefix plus positional embedding 0, rows 1..m embed the
    target tokens. Returns logits [B, 1+m, V] ([1+m, V] for unbatched input);
    position t scores the token that follows input row t.
    """
    cfg = params.config
    single = prefix.ndim == 1
    if single:
        prefix = ad.reshape(prefix, (1, prefix.shape[0]))
    target = _as_batch(target)
    B, m = target.shape
    if prefix.shape != (B, cfg.hidden_dim):
        raise ShapeError("decode_with_prefix", prefix.shape, target.shape)
    _check_length(cfg, 1 + m)
    _check_ids(cfg, target)
    mask = target != cfg.pad_token_id if mask is None else np.asarray(mask, dtype=bool).reshape(B, m)
    rows = ad.concat([ad.reshape(prefix, (B, 1, cfg.hidden_dim)), ad.embedding(params["tok_emb"], target)], axis=1)
    x = rows + params["pos_emb"][: 1 + m]
    key_mask = np.concatenate([np.ones((B, 1), dtype=bool), mask], axis=1)
    logits = _run_blocks(params, x, key_mask) @ output_projection(params)
    if single:
        return ad.reshape(logits, (1 + m, cfg.vocab_size))
    return logits


def output_projection(params: ModelParams) -> Tensor:
    return params["lm_head"]


def greedy_decode(params: ModelParams, prefix, max_len: Optional[int] = None) -> list[int]:
    """Generate tokens from a soft prefix until [EOS] or ``max_len`` tokens."""
    cfg = params.config
    prefix = prefix if isinstance(prefix, Tensor) else Tensor(np.asarray(prefix, dtype=params.dtype))
    prefix = prefix.detach()
    limit = cfg.max_seq_len - 1 if max_len is None else min(max_len, cfg.max_seq_len - 1)
    out: list[int] = []
    for _ in range(limit):
        logits = decode_with_prefix(params, prefix, np.asarray(out, dtype=np.int64))
        nxt = int(np.argmax(logits.data[-1]))
        if nxt == cfg.eos_token_id:
            break
        out.append(nxt)
    return out


# -- checkpoints -------------------------------------------------------------

MAGIC = b"AEMB"
FORMAT_VERSION = 1


def save_checkpoint(params: ModelParams, config: ModelConfig, path) -> None:
    """Write magic, version, config JSON and f32 tensors; atomic via rename."""
    if params.adapters:
        raise CheckpointError("merge adapters before saving a checkpoint")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    cfg_bytes = json.dumps(config.to_dict(), sort_keys=True).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_bytes)))
    buf.write(cfg_bytes)
    buf.write(struct.pack("<I", len(params.tensors)))
    for name, t in params.tensors.items():
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<B", t.ndim))
        buf.write(struct.pack(f"<{t.ndim}I", *t.shape))
        buf.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}, file has {len(self.raw)}")
        chunk = self.raw[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig]:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    r = _Reader(raw)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes (not an AEMB checkpoint)")
    (version,) = r.unpack("<I")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version} (expected {FORMAT_VERSION})")
    (cfg_len,) = r.unpack("<I")
    try:
        config = ModelConfig.from_dict(json.loads(r.take(cfg_len).decode("utf-8")))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: invalid config block: {exc}") from exc
    (count,) = r.unpack("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode("utf-8")
        (ndim,) = r.unpack("<B")
        shape = r.unpack(f"<{ndim}I")
        data = np.frombuffer(r.take(4 * math.prod(shape)), dtype="<f4").reshape(shape).astype(np.float32)
        tensors[name] = Tensor(data, requires_grad=True, name=name)
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes after tensor manifest")
    try:
        params = ModelParams(config, tensors)
    except (ValueError, ShapeError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
    return params, config
