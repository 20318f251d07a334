import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchor_embed import autodiff as ad
from anchor_embed.autodiff import Tensor
from anchor_embed.model import (
    CheckpointError,
    ModelConfig,
    SequenceTooLongError,
    append_eos,
    count_parameters,
    decode_with_prefix,
    encode_eos,
    forward_hidden,
    greedy_decode,
    init_params,
    load_checkpoint,
    save_checkpoint,
)

SMALL = ModelConfig(vocab_size=20, hidden_dim=8, num_layers=2, num_heads=2, ffn_dim=16, max_seq_len=12)


@pytest.fixture(scope="module")
def params():
    return init_params(SMALL, seed=3, dtype=np.float64)


def test_config_rejects_bad_heads():
    with pytest.raises(ValueError, match="divisible"):
        ModelConfig(hidden_dim=10, num_heads=3)


def test_config_rejects_shared_special_ids():
    with pytest.raises(ValueError):
        ModelConfig(eos_token_id=0, pad_token_id=0)
    with pytest.raises(ValueError):
        ModelConfig(vocab_size=8, eos_token_id=9)


def test_init_is_deterministic_per_seed():
    a, b, c = init_params(SMALL, 1), init_params(SMALL, 1), init_params(SMALL, 2)
    assert a.equal(b)
    assert not a.equal(c)


def test_parameter_count_closed_form():
    # written out from the architecture: embeddings, per-layer (2 gains, 4 attention
    # matrices, 2 MLP matrices), final gain, output head
    V, d, L, F, S = 64, 64, 2, 256, 48
    expected = V * d + S * d + L * (2 * d + 4 * d * d + 2 * d * F) + d + d * V
    assert expected == 109_888
    cfg = ModelConfig()
    assert count_parameters(cfg) == expected
    assert init_params(cfg, 0).num_parameters() == expected


def test_init_scales():
    p = init_params(ModelConfig(), 0)
    assert np.std(p["layers.0.wq"].data) == pytest.approx(0.02, rel=0.05)
    assert np.std(p["layers.0.wo"].data) == pytest.approx(0.02 / math.sqrt(4), rel=0.05)
    assert np.all(p["final_norm"].data == 1.0)


def test_forward_shape(params):
    tokens = np.array([[2, 3, 4, 5], [6, 7, 0, 0]])
    assert forward_hidden(params, tokens).shape == (2, 4, 8)


def test_forward_rejects_overlong(params):
    with pytest.raises(SequenceTooLongError, match="T=13.*max_seq_len=12"):
        forward_hidden(params, np.full((1, 13), 3))


def test_forward_rejects_out_of_vocab(params):
    with pytest.raises(ValueError):
        forward_hidden(params, np.array([[2, 20]]))


@settings(max_examples=20, deadline=None)
@given(
    tokens=st.lists(st.integers(2, 19), min_size=2, max_size=10),
    pos=st.integers(0, 9),
    new=st.integers(2, 19),
)
def test_causality(params, tokens, pos, new):
    pos = min(pos, len(tokens) - 1)
    a = forward_hidden(params, np.array([tokens])).data
    changed = list(tokens)
    changed[pos] = new
    b = forward_hidden(params, np.array([changed])).data
    np.testing.assert_array_equal(a[0, :pos], b[0, :pos])


def _scalar_reference(p, tokens):
    """Straight-line loops for a 1-layer, 1-head model: the attention oracle."""
    T, d = len(tokens), p["tok_emb"].shape[1]
    W = {k: p[k].data for k in p}

    def rms(v, g):
        s = math.sqrt(sum(x * x for x in v) / d + 1e-6)
        return [v[i] / s * g[i] for i in range(d)]

    def matvec(v, M):
        return [sum(v[i] * M[i][j] for i in range(len(v))) for j in range(M.shape[1])]

    x = [[W["tok_emb"][tokens[t]][i] + W["pos_emb"][t][i] for i in range(d)] for t in range(T)]
    h = [rms(x[t], W["layers.0.attn_norm"]) for t in range(T)]
    q = [matvec(h[t], W["layers.0.wq"]) for t in range(T)]
    k = [matvec(h[t], W["layers.0.wk"]) for t in range(T)]
    v = [matvec(h[t], W["layers.0.wv"]) for t in range(T)]
    out = []
    for t in range(T):
        scores = [sum(q[t][i] * k[s][i] for i in range(d)) / math.sqrt(d) for s in range(t + 1)]
        mx = max(scores)
        w = [math.exp(s - mx) for s in scores]
        z = sum(w)
        ctx = [sum(w[s] / z * v[s][i] for s in range(t + 1)) for i in range(d)]
        a = matvec(ctx, W["layers.0.wo"])
        x1 = [x[t][i] + a[i] for i in range(d)]
        up = matvec(rms(x1, W["layers.0.mlp_norm"]), W["layers.0.w_up"])
        act = [u / (1 + math.exp(-u)) for u in up]
        down = matvec(act, W["layers.0.w_down"])
        x2 = [x1[i] + down[i] for i in range(d)]
        out.append(rms(x2, W["final_norm"]))
    return np.array(out)


def test_forward_matches_scalar_attention_oracle():
    cfg = ModelConfig(vocab_size=6, hidden_dim=4, num_layers=1, num_heads=1, ffn_dim=5, max_seq_len=4)
    p = init_params(cfg, seed=5, dtype=np.float64)
    rng = np.random.default_rng(0)
    for name, t in p.named_tensors():
        t.data[...] = rng.normal(0, 0.5, size=t.shape) + (1.0 if name.endswith("norm") else 0.0)
    tokens = [2, 5, 3]
    ours = forward_hidden(p, np.array([tokens])).data[0]
    np.testing.assert_allclose(ours, _scalar_reference(p, tokens), rtol=1e-10, atol=1e-12)


def test_append_eos_positions():
    tokens = np.array([[5, 6, 7], [8, 0, 0]])
    out, mask, idx = append_eos(SMALL, tokens)
    np.testing.assert_array_equal(out, [[5, 6, 7, 1], [8, 1, 0, 0]])
    np.testing.assert_array_equal(idx, [3, 1])
    np.testing.assert_array_equal(mask.sum(axis=1), [4, 2])


def test_encode_padding_invariance(params):
    alone = encode_eos(params, np.array([[4, 5, 6]])).data
    batched = encode_eos(params, np.array([[9, 9, 9, 9, 9, 9], [4, 5, 6, 0, 0, 0]])).data[1]
    padded_more = encode_eos(params, np.array([[4, 5, 6, 0, 0, 0, 0, 0]])).data[0]
    np.testing.assert_allclose(batched, alone[0], atol=1e-6)
    np.testing.assert_allclose(padded_more, alone[0], atol=1e-6)


def test_encode_composition(params):
    tokens = [3, 4, 5]
    hidden = forward_hidden(params, np.array([tokens + [SMALL.eos_token_id]])).data[0, -1]
    np.testing.assert_array_equal(encode_eos(params, np.array([tokens])).data[0], hidden)


def test_encode_empty_sequence_is_eos_alone(params):
    empty = encode_eos(params, np.zeros((1, 0), dtype=np.int64)).data
    eos_only = forward_hidden(params, np.array([[SMALL.eos_token_id]])).data[:, 0]
    np.testing.assert_array_equal(empty, eos_only)


def test_encode_distinct_inputs_differ(params):
    e = encode_eos(params, np.array([[2, 3, 4], [4, 3, 2]])).data
    assert not np.allclose(e[0], e[1])
    assert e.shape == (2, SMALL.hidden_dim)


def test_decode_shapes(params):
    prefix = encode_eos(params, np.array([[2, 3]]))
    assert decode_with_prefix(params, prefix[0], np.array([4, 5, 6])).shape == (4, SMALL.vocab_size)
    assert decode_with_prefix(params, prefix, np.array([[4, 5, 6]])).shape == (1, 4, SMALL.vocab_size)


def test_decode_rejects_overlong(params):
    with pytest.raises(SequenceTooLongError):
        decode_with_prefix(params, Tensor(np.zeros(8)), np.full(12, 3))


def test_prefix_reaches_position_zero(params):
    target = np.array([4, 5])
    a = decode_with_prefix(params, Tensor(np.ones(8)), target).data
    b = decode_with_prefix(params, Tensor(np.ones(8) * -1.0 + 0.3), target).data
    assert not np.allclose(a[0], b[0])


def test_gradient_flows_through_prefix_into_encoder(params):
    p = params.copy()
    e = encode_eos(p, np.array([[2, 3, 4]]))
    logits = decode_with_prefix(p, e[0], np.array([5, 6]))
    ad.backward(ad.cross_entropy(logits, np.array([5, 6, 1])), inputs=p.trainable().values())
    # rows of the query tokens only receive gradient through the prefix path
    assert np.abs(p["tok_emb"].grad[[2, 3]]).sum() > 0


def test_greedy_decode_stops_at_limit(params):
    out = greedy_decode(params, np.zeros(8), max_len=3)
    assert len(out) <= 3


def test_checkpoint_round_trip(tmp_path):
    p = init_params(SMALL, 7)
    path = tmp_path / "m.ckpt"
    save_checkpoint(p, SMALL, path)
    q, cfg = load_checkpoint(path)
    assert cfg == SMALL
    assert p.equal(q)
    probe = np.array([[2, 3, 4, 0], [5, 6, 7, 8]])
    np.testing.assert_array_equal(encode_eos(p, probe).data, encode_eos(q, probe).data)
    assert not list(tmp_path.glob("*.tmp"))


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_params(SMALL, 0), SMALL, path)
    raw = path.read_bytes()
    assert raw[:4] == b"AEMB"
    assert int.from_bytes(raw[4:8], "little") == 1


@pytest.mark.parametrize(
    "corrupt,match",
    [
        (lambda raw: b"XXXX" + raw[4:], "magic"),
        (lambda raw: raw[:4] + (2).to_bytes(4, "little") + raw[8:], "version"),
        (lambda raw: raw[:-10], "truncated"),
        (lambda raw: raw + b"\0", "trailing"),
    ],
)
def test_checkpoint_corruption_is_reported(tmp_path, corrupt, match):
    path = tmp_path / "m.ckpt"
    save_checkpoint(init_params(SMALL, 0), SMALL, path)
    path.write_bytes(corrupt(path.read_bytes()))
    with pytest.raises(CheckpointError, match=match):
        load_checkpoint(path)


def test_checkpoint_refuses_attached_adapters(tmp_path):
    from anchor_embed.adapters import attach_adapters

    p = attach_adapters(init_params(SMALL, 0), rank=2)
    with pytest.raises(CheckpointError, match="merge"):
        save_checkpoint(p, SMALL, tmp_path / "m.ckpt")


def test_logits_are_deterministic():
    tokens = np.array([[3, 4, 5]])
    a = decode_with_prefix(init_params(SMALL, 4), Tensor(np.ones(8, dtype=np.float32)), tokens).data
    b = decode_with_prefix(init_params(SMALL, 4), Tensor(np.ones(8, dtype=np.float32)), tokens).data
    np.testing.assert_array_equal(a, b)
