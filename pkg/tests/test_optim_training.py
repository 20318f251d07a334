import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anchor_embed.ablation import AblationGrid, AblationResult, RunSpec
from anchor_embed.autodiff import Tensor
from anchor_embed.optim import AdamW, global_grad_norm, warmup_constant_lr
from anchor_embed.retrieval import EvalReport
from anchor_embed.training import TrainReport

# [DERIVED] three AdamW steps (lr 0.1, decay 0.01 on the matrix only) on
# loss = sum(w**3) + (b . [1, 2])**2, computed once with torch.optim.AdamW
# in float64 and frozen here
ADAMW_W = [[0.21212592323630852, -1.2969299294078973], [1.6958337994132422, -0.010367183509699993]]
ADAMW_B = [0.5912215913874902, -0.40877840785225533]


def test_adamw_matches_reference_trajectory():
    w = Tensor(np.array([[0.5, -1.0], [2.0, 0.25]]))
    b = Tensor(np.array([0.3, -0.7]))
    coef = np.array([1.0, 2.0])
    opt = AdamW(weight_decay=0.01)
    for _ in range(3):
        w.grad = 3 * w.data**2
        b.grad = 2 * float(b.data @ coef) * coef
        opt.step({"w": w, "b": b}, lr=0.1)
    np.testing.assert_allclose(w.data, ADAMW_W, rtol=1e-12)
    np.testing.assert_allclose(b.data, ADAMW_B, rtol=1e-12)


def test_adamw_decays_matrices_only():
    w, g = Tensor(np.ones((2, 2))), Tensor(np.ones(2))
    AdamW(weight_decay=0.5).step({"w": w, "g": g}, lr=0.1)  # no grads: pure decay
    np.testing.assert_allclose(w.data, 0.95)
    np.testing.assert_array_equal(g.data, 1.0)


def test_adamw_keeps_dtype():
    w = Tensor(np.ones((2, 2), dtype=np.float32))
    w.grad = np.ones((2, 2), dtype=np.float32)
    AdamW().step({"w": w}, lr=1e-3)
    assert w.data.dtype == np.float32


def test_warmup_schedule_values():
    assert [warmup_constant_lr(s, 1.0, 4) for s in range(6)] == [0.25, 0.5, 0.75, 1.0, 1.0, 1.0]
    assert warmup_constant_lr(0, 3e-4, 0) == 3e-4


@settings(max_examples=50)
@given(step=st.integers(0, 10_000), warmup=st.integers(0, 500), lr=st.floats(1e-6, 1.0))
def test_warmup_is_bounded_and_monotone(step, warmup, lr):
    a, b = warmup_constant_lr(step, lr, warmup), warmup_constant_lr(step + 1, lr, warmup)
    assert 0 < a <= b <= lr


def test_global_grad_norm_skips_missing_grads():
    a, b = Tensor(np.zeros(2)), Tensor(np.zeros(3))
    a.grad = np.array([3.0, 4.0])
    assert global_grad_norm({"a": a, "b": b}) == 5.0


def test_train_report_csv_round_trip(tmp_path):
    report = TrainReport(("step", "info_nce", "lr"))
    for s in range(3):
        report.log(step=s, info_nce=1.0 / (s + 3), lr=1e-3)
    report.to_csv(tmp_path / "r.csv")
    back = TrainReport.read_csv(tmp_path / "r.csv")
    assert back.columns == report.columns and back.records == report.records
    assert back.at_step(2)["info_nce"] == 0.2
    with pytest.raises(KeyError):
        back.at_step(7)


def test_grid_labels():
    runs = AblationGrid.stage_axis(steps_matched=True).runs()
    assert [r.label for r in runs] == ["none", "I(a=0.2)", "II", "I+II(a=0.2)", "II-matched"]
    assert [r.label for r in AblationGrid.alpha_axis((0.0, 1.0)).runs()] == ["I+II(a=0)", "I+II(a=1)"]


@pytest.mark.parametrize(
    "kwargs,match",
    [
        ({"stages": ("III",)}, "unknown"),
        ({"alphas": (1.5,)}, r"\[0, 1\]"),
        ({"alphas": (0.2, 0.2)}, "repeat"),
        ({"stages": (), "steps_matched": False}, "empty"),
        ({"stages": ("I",), "alphas": ()}, "alpha"),
    ],
)
def test_grid_validation(kwargs, match):
    with pytest.raises(ValueError, match=match):
        AblationGrid(**kwargs)


def test_early_comparisons_pair_seeds_and_steps():
    def curve(values):
        report = TrainReport(("step", "info_nce", "lr"))
        for step, v in values.items():
            report.log(step=step, info_nce=v, lr=1e-3)
        return report

    result = AblationResult(
        reports=[EvalReport(0.5, 0.9, 0.6, 0.7, label="II", seed=0)],
        stage2_curves={
            (0, "I+II(a=0.2)"): curve({25: 1.0, 50: 0.5}),
            (0, "II"): curve({25: 2.0, 50: 0.4}),
            (1, "I+II(a=0.2)"): curve({25: 1.0, 50: 0.5}),
        },
    )
    rows = result.early_comparisons(RunSpec("I+II", 0.2).label, steps=(25, 50))
    assert rows == [(0, 25, 1.0, 2.0), (0, 50, 0.5, 0.4)]
    assert result.mean("II") == 0.5
    with pytest.raises(KeyError):
        result.mean("I")
