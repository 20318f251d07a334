import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from anchor_embed.data import Tokenizer, generate_synthetic_pairs
from anchor_embed.estimator import AnchorEmbedder, check_pairs, check_texts

TOK = Tokenizer()
FAST = dict(hidden_dim=16, num_heads=2, ffn_dim=32, num_layers=1, stage1_steps=3, stage2_steps=3, batch_size=8)


def string_pairs(n, seed=0):
    return [(TOK.detokenize(p.query), TOK.detokenize(p.document)) for p in generate_synthetic_pairs(seed, n)]


def test_params_round_trip_through_clone():
    est = AnchorEmbedder(alpha=0.5, adapter_rank=4)
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    assert twin.set_params(tau=0.1).tau == 0.1


def test_fit_transform_shapes_and_determinism():
    pairs = string_pairs(24)
    a = AnchorEmbedder(**FAST).fit(pairs)
    b = AnchorEmbedder(**FAST).fit(pairs)
    emb = a.transform(["qrabc", "QRABCD"])
    assert emb.shape == (2, 16) and a.n_features_out_ == 16
    np.testing.assert_array_equal(emb, b.transform(["qrabc", "QRABCD"]))
    assert len(a.stage1_report_.records) == 3


def test_contrastive_only_baseline_skips_stage1():
    est = AnchorEmbedder(**{**FAST, "stage1_steps": 0}).fit(string_pairs(16))
    assert est.stage1_report_ is None and est.stage2_report_ is not None


def test_score_and_similarity():
    pairs = string_pairs(16)
    est = AnchorEmbedder(**FAST).fit(pairs)
    assert 0.0 <= est.score(pairs) <= 1.0
    assert est.similarity(["qrab"], ["AB", "CD"]).shape == (1, 2)


def test_unfitted_transform_raises():
    with pytest.raises(NotFittedError):
        AnchorEmbedder().transform(["qr"])


def test_validation_helpers():
    with pytest.raises(TypeError, match="single string"):
        check_texts("abc")
    with pytest.raises(ValueError, match="empty string"):
        check_texts(["a", ""])
    with pytest.raises(TypeError, match="expected str"):
        check_texts(["a", 3])
    with pytest.raises(ValueError, match="at least 2"):
        check_pairs([("a", "b")], TOK)
    with pytest.raises(ValueError, match="must be"):
        check_pairs([("a",), ("b", "c")], TOK)
    pairs = check_pairs([("a", "b", ["c"]), ("d", "e")], TOK)
    assert pairs[0].hard_negatives == (TOK.tokenize("c"),)
