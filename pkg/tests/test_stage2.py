import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchor_embed import autodiff as ad
from anchor_embed.adapters import adapter_parameter_count, attach_adapters, merge_adapters
from anchor_embed.autodiff import DegenerateNormError, Tensor
from anchor_embed.data import PairBatch, QDPair, SyntheticSpec, generate_synthetic_pairs
from anchor_embed.model import ModelConfig, encode_eos, init_params
from anchor_embed.stage2 import (
    AdapterConfig,
    NoNegativesError,
    Stage2Config,
    candidate_mask,
    info_nce,
    info_nce_from_embeddings,
    sim,
    train_stage2,
)

CFG = ModelConfig()
SMALL = ModelConfig(hidden_dim=16, num_heads=2, ffn_dim=32, num_layers=1)


def test_sim_examples():
    v = Tensor([0.3, -1.2, 2.0])
    assert sim(v, v, 0.05).item() == pytest.approx(20.0, abs=1e-12)
    assert sim(Tensor([1.0, 0.0]), Tensor([0.0, 1.0]), 0.05).item() == 0.0
    with pytest.raises(DegenerateNormError):
        sim(Tensor([0.0, 0.0]), v[:2], 0.05)
    with pytest.raises(ValueError):
        sim(v, v, 0.0)


@settings(max_examples=30)
@given(
    a=st.lists(st.floats(-5, 5), min_size=3, max_size=3).filter(lambda x: np.linalg.norm(x) > 1e-3),
    b=st.lists(st.floats(-5, 5), min_size=3, max_size=3).filter(lambda x: np.linalg.norm(x) > 1e-3),
    c=st.floats(0.01, 100),
)
def test_sim_scale_invariant(a, b, c):
    base = sim(Tensor(a), Tensor(b), 0.05).item()
    assert sim(Tensor(np.array(a) * c), Tensor(b), 0.05).item() == pytest.approx(base, rel=1e-9, abs=1e-9)


def test_uniform_similarities_give_log_batch():
    e = Tensor(np.ones((4, 6)))
    assert info_nce_from_embeddings(e, e, 0.05).item() == pytest.approx(math.log(4), abs=1e-12)
    assert math.log(4) == pytest.approx(1.386294, abs=1e-6)


def test_confident_positive_with_orthogonal_negatives():
    # direct evaluation: -log(e^20 / (e^20 + 3 e^0)) = log1p(3 e^-20) = 6.1832e-9
    eye = np.eye(4)
    loss = info_nce_from_embeddings(Tensor(eye[:1]), Tensor(eye[:1]), 0.05, neg_emb=Tensor(eye[1:]))
    assert loss.item() == pytest.approx(6.183167e-09, rel=1e-5)


def test_duplicating_a_hard_negative_increases_loss():
    rng = np.random.default_rng(0)
    q, d, n = (Tensor(rng.normal(size=s)) for s in [(2, 5), (2, 5), (2, 5)])
    owner = np.array([[True, False], [False, True]])
    base = info_nce_from_embeddings(q, d, 0.1, n, np.concatenate([np.ones((2, 2), bool), owner], axis=1))
    n2 = ad.concat([n, n[:1]], axis=0)
    owner2 = np.concatenate([owner, [[True], [False]]], axis=1)
    dup = info_nce_from_embeddings(q, d, 0.1, n2, np.concatenate([np.ones((2, 2), bool), owner2], axis=1))
    assert dup.item() > base.item()


@pytest.fixture(scope="module")
def pairs():
    return generate_synthetic_pairs(0, 64, SyntheticSpec(hard_negatives=2))


def _numpy_info_nce(params, batch, tau):
    """Independent formulation: explicit per-query log-sum-exp over allowed candidates."""
    q = encode_eos(params, batch.query_tokens, batch.query_mask).data
    d = encode_eos(params, batch.doc_tokens, batch.doc_mask).data
    n = encode_eos(params, batch.neg_tokens, batch.neg_mask).data
    unit = lambda x: x / np.linalg.norm(x, axis=1, keepdims=True)  # noqa: E731
    q, d, n = unit(q), unit(d), unit(n)
    losses = []
    for i in range(batch.size):
        cands = [d[i]] + [d[j] for j in range(batch.size) if j != i] + [n[k] for k in np.flatnonzero(batch.neg_owner == i)]
        s = np.array([q[i] @ c for c in cands]) / tau
        losses.append(-(s[0] - np.log(np.exp(s - s.max()).sum()) - s.max()))
    return float(np.mean(losses))


def test_info_nce_matches_independent_cross_entropy(pairs):
    p = init_params(CFG, 0, dtype=np.float64)
    rng = np.random.default_rng(1)
    p["tok_emb"].data[...] = rng.normal(0, 0.5, size=p["tok_emb"].shape)
    batch = PairBatch.from_pairs(pairs[:6], max_hard_negatives=2)
    assert info_nce(p, batch, 0.05).item() == pytest.approx(_numpy_info_nce(p, batch, 0.05), rel=1e-6)


def test_temperature_preserves_argmax(pairs):
    from anchor_embed.stage2 import similarity_logits

    p = init_params(CFG, 0, dtype=np.float64)
    batch = PairBatch.from_pairs(pairs[:8])
    q = encode_eos(p, batch.query_tokens, batch.query_mask)
    d = encode_eos(p, batch.doc_tokens, batch.doc_mask)
    a = similarity_logits(q, d, 0.05).data.argmax(axis=1)
    b = similarity_logits(q, d, 1.0).data.argmax(axis=1)
    np.testing.assert_array_equal(a, b)


def test_candidate_mask_drops_duplicate_positives_and_foreign_negatives():
    same = (5, 6)
    batch = PairBatch.from_pairs([QDPair((2,), same, ((7,),)), QDPair((3,), same), QDPair((4,), (8, 9))])
    m = candidate_mask(batch)
    np.testing.assert_array_equal(m[:, :3], [[True, False, True], [False, True, True], [True, True, True]])
    np.testing.assert_array_equal(m[:, 3], [True, False, False])


def test_empty_negative_set_rejected():
    batch = PairBatch.from_pairs([QDPair((2,), (3,))])
    with pytest.raises(NoNegativesError, match="empty negative set"):
        info_nce(init_params(SMALL, 0), batch, 0.05)


def test_initial_loss_near_log_candidates(pairs):
    batch = PairBatch.from_pairs(generate_synthetic_pairs(5, 32), max_hard_negatives=1)
    loss = info_nce(init_params(CFG, 0), batch, 0.05).item()
    assert abs(loss - math.log(33)) < 0.3


def test_zero_steps_is_identity(pairs):
    p = init_params(SMALL, 0)
    q, report = train_stage2(p, pairs, Stage2Config(steps=0))
    assert p.equal(q) and report.records == []


def test_training_is_deterministic(pairs):
    p = init_params(SMALL, 0)
    cfg = Stage2Config(steps=3, batch_size=8)
    a, ra = train_stage2(p, pairs, cfg)
    b, rb = train_stage2(p, pairs, cfg)
    assert ra.records == rb.records and a.equal(b)
    assert ra.columns == ("step", "info_nce", "lr")


def test_contrastive_training_needs_negatives():
    with pytest.raises(NoNegativesError):
        train_stage2(init_params(SMALL, 0), [QDPair((2,), (3,))], Stage2Config(steps=1, hard_negatives=0))


def test_adapter_training_touches_only_targets_and_merges(pairs):
    p = init_params(SMALL, 0)
    cfg = Stage2Config(steps=3, batch_size=8, adapter=AdapterConfig(rank=2))
    q, _ = train_stage2(p, pairs, cfg)
    assert not q.adapters
    for name in p:
        changed = not np.array_equal(p[name].data, q[name].data)
        assert changed == name.endswith(("wq", "wv")), name


# -- adapters ----------------------------------------------------------------


def test_zero_init_adapters_are_bit_identical():
    p = init_params(CFG, 0)
    probe = np.array([[2, 3, 4, 5], [6, 7, 0, 0]])
    before = encode_eos(p, probe).data
    attach_adapters(p, rank=16, seed=3)
    np.testing.assert_array_equal(encode_eos(p, probe).data, before)


def test_merge_matches_adapted_forward():
    p = attach_adapters(init_params(CFG, 0, dtype=np.float64), rank=16, seed=1)
    rng = np.random.default_rng(2)
    for a in p.adapters.values():
        a.B.data[...] = rng.normal(0, 0.05, size=a.B.shape)
    probe = np.array([[2, 3, 4, 5], [6, 7, 8, 0]])
    merged = merge_adapters(p)
    np.testing.assert_allclose(encode_eos(merged, probe).data, encode_eos(p, probe).data, atol=1e-6)


def test_trainable_count_closed_form():
    # 2 layers x {wq, wv} x r * (d_in + d_out) with d = 64, r = 16
    expected = 2 * 2 * 16 * (64 + 64)
    p = attach_adapters(init_params(CFG, 0), rank=16)
    assert p.num_parameters(trainable_only=True) == expected == 8192
    assert adapter_parameter_count(p, 16) == expected


def test_adapter_rank_bounds():
    with pytest.raises(ValueError, match="exceeds"):
        attach_adapters(init_params(SMALL, 0), rank=17)
    with pytest.raises(ValueError):
        AdapterConfig(rank=0)


def test_frozen_base_gets_no_gradient():
    p = attach_adapters(init_params(SMALL, 0), rank=2)
    batch = PairBatch.from_pairs(generate_synthetic_pairs(0, 4))
    ad.backward(info_nce(p, batch, 0.05), inputs=p.trainable().values())
    assert all(t.grad is None for t in p.tensors.values())
    assert all(a.A.grad is not None for a in p.adapters.values())
