"""Stage and alpha ablations: every configuration starts from the same init per seed."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .data import QDPair
from .model import ModelConfig, ModelParams, init_params
from .retrieval import EvalReport, evaluate_pairs, format_reports, write_reports_csv
from .stage1 import Stage1Config, train_stage1
from .stage2 import Stage2Config, train_stage2
from .training import TrainReport

STAGES = ("none", "I", "II", "I+II")
ALPHAS = (0.0, 0.2, 0.5, 0.8, 1.0)
EARLY_STEPS = (25, 50, 75)


@dataclass(frozen=True)
class RunSpec:
    stage: str
    alpha: Optional[float] = None
    matched: bool = False

    @property
    def label(self) -> str:
        if self.matched:
            return "II-matched"
        if self.alpha is None:
            return self.stage
        return f"{self.stage}(a={self.alpha:g})"


@dataclass
class AblationGrid:
    """Configurations over the stage axis, the alpha axis and the steps-matched control.

    Stages that contain Stage I are crossed with every alpha; ``II-matched`` is
    Stage II alone for stage1.steps + stage2.steps steps.
    """

    stages: tuple[str, ...] = STAGES
    alphas: tuple[float, ...] = (0.2,)
    steps_matched: bool = False

    def __post_init__(self):
        self.stages = tuple(self.stages)
        self.alphas = tuple(float(a) for a in self.alphas)
        bad = [s for s in self.stages if s not in STAGES]
        if bad:
            raise ValueError(f"unknown stages {bad}; choose from {STAGES}")
        if not self.stages and not self.steps_matched:
            raise ValueError("empty ablation grid")
        if any(not 0.0 <= a <= 1.0 for a in self.alphas):
            raise ValueError("alphas must lie in [0, 1]")
        if len(set(self.alphas)) != len(self.alphas) or len(set(self.stages)) != len(self.stages):
            raise ValueError("grid axes must not repeat values")
        if not self.alphas and any("I" in s.split("+") for s in self.stages):
            raise ValueError("stages with Stage I need at least one alpha")

    @classmethod
    def stage_axis(cls, alpha: float = 0.2, steps_matched: bool = False) -> "AblationGrid":
        return cls(stages=STAGES, alphas=(alpha,), steps_matched=steps_matched)

    @classmethod
    def alpha_axis(cls, alphas: Sequence[float] = ALPHAS) -> "AblationGrid":
        return cls(stages=("I+II",), alphas=tuple(alphas))

    def runs(self) -> list[RunSpec]:
        out = []
        for stage in self.stages:
            if stage in ("I", "I+II"):
                out.extend(RunSpec(stage, a) for a in self.alphas)
            else:
                out.append(RunSpec(stage))
        if self.steps_matched:
            out.append(RunSpec("II", matched=True))
        return out


@dataclass
class AblationResult:
    reports: list[EvalReport] = field(default_factory=list)
    # (seed, label) -> Stage II loss curve, kept for early-convergence comparisons
    stage2_curves: dict = field(default_factory=dict)

    def mean(self, label: str, metric: str = "recall_at_1") -> float:
        values = [getattr(r, metric) for r in self.reports if r.label == label]
        if not values:
            raise KeyError(f"no runs labelled {label!r}")
        return float(np.mean(values))

    def labels(self) -> list[str]:
        return list(dict.fromkeys(r.label for r in self.reports))

    def early_comparisons(self, init_label: str, fresh_label: str = "II", steps: Sequence[int] = EARLY_STEPS):
        """(seed, step, init loss, fresh loss) for every seed both runs share."""
        rows = []
        seeds = sorted({s for s, lab in self.stage2_curves if lab == init_label})
        for seed in seeds:
            a = self.stage2_curves[(seed, init_label)]
            b = self.stage2_curves.get((seed, fresh_label))
            if b is None:
                continue
            for step in steps:
                rows.append((seed, step, a.at_step(step)["info_nce"], b.at_step(step)["info_nce"]))
        return rows

    def summary(self) -> str:
        lines = [format_reports(self.reports), "", "mean over seeds"]
        for label in self.labels():
            lines.append(
                f"  {label:<18} recall@1={self.mean(label):.4f}  mrr={self.mean(label, 'mrr'):.4f}"
                f"  ndcg@10={self.mean(label, 'ndcg_at_10'):.4f}"
            )
        return "\n".join(lines)

    def write(self, out_dir) -> None:
        out_dir = Path(out_dir)
        write_reports_csv(self.reports, out_dir / "ablation.csv")
        (out_dir / "ablation.txt").write_text(self.summary() + "\n")
        with (out_dir / "stage2_curves.csv").open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["seed", "label", "step", "info_nce"])
            for (seed, label), report in sorted(self.stage2_curves.items()):
                for rec in report.records:
                    w.writerow([seed, label, rec["step"], f"{rec['info_nce']:.6f}"])


def run_ablation(
    grid: AblationGrid,
    train: Sequence[QDPair],
    held_out: Sequence[QDPair],
    seeds: Sequence[int],
    model_config: Optional[ModelConfig] = None,
    stage1: Optional[Stage1Config] = None,
    stage2: Optional[Stage2Config] = None,
    corpus: str = "synthetic",
    eval_batch_size: int = 32,
    log: Optional[Callable[[str], None]] = None,
) -> AblationResult:
    """Train and evaluate every grid configuration for every seed.

    Per seed, all configurations share one initialization; Stage I runs are
    cached per alpha and the fresh Stage II run is shared, so "I" and "I+II"
    see the very same Stage I weights.
    """
    if not seeds:
        raise ValueError("need at least one seed")
    model_config = model_config or ModelConfig()
    stage1 = stage1 or Stage1Config()
    stage2 = stage2 or Stage2Config()
    result = AblationResult()
    say = log or (lambda msg: None)

    for seed in seeds:
        init = init_params(model_config, seed)
        s1 = replace(stage1, seed=seed)
        s2 = replace(stage2, seed=seed)
        stage1_cache: dict[float, ModelParams] = {}
        stage2_cache: dict[tuple, tuple[ModelParams, TrainReport]] = {}

        def after_stage1(alpha: float) -> ModelParams:
            if alpha not in stage1_cache:
                say(f"seed {seed}: stage I alpha={alpha:g}")
                stage1_cache[alpha], _ = train_stage1(init, train, replace(s1, alpha=alpha))
            return stage1_cache[alpha]

        def after_stage2(alpha: Optional[float], steps: int) -> tuple[ModelParams, TrainReport]:
            key = (alpha, steps)
            if key not in stage2_cache:
                start = init if alpha is None else after_stage1(alpha)
                say(f"seed {seed}: stage II from {'init' if alpha is None else f'stage I alpha={alpha:g}'} ({steps} steps)")
                stage2_cache[key] = train_stage2(start, train, replace(s2, steps=steps))
            return stage2_cache[key]

        for run in grid.runs():
            if run.stage == "none":
                params = init
            elif run.stage == "I":
                params = after_stage1(run.alpha)
            elif run.matched:
                params, curve = after_stage2(None, stage1.steps + stage2.steps)
                result.stage2_curves[(seed, run.label)] = curve
            else:
                params, curve = after_stage2(run.alpha, stage2.steps)
                result.stage2_curves[(seed, run.label)] = curve
            report = evaluate_pairs(params, held_out, label=run.label, seed=seed, corpus=corpus, batch_size=eval_batch_size)
            say(f"seed {seed}: {run.label:<12} recall@1={report.recall_at_1:.4f}")
            result.reports.append(report)
    return result
