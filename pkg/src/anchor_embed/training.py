"""Training-loop plumbing shared by both stages: step records, reports, divergence checks."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence


class TrainingDivergedError(RuntimeError):
    """A loss or gradient became non-finite during training."""


@dataclass
class TrainReport:
    columns: tuple[str, ...]
    records: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def log(self, **values) -> None:
        self.records.append({c: values[c] for c in self.columns})

    def column(self, name: str) -> list:
        return [r[name] for r in self.records]

    def at_step(self, step: int) -> dict:
        for r in self.records:
            if r["step"] == step:
                return r
        raise KeyError(f"no record for step {step}")

    def to_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.columns)
            for r in self.records:
                writer.writerow([_fmt(r[c]) for c in self.columns])

    @classmethod
    def read_csv(cls, path) -> "TrainReport":
        with Path(path).open(newline="") as fh:
            rows = list(csv.reader(fh))
        columns = tuple(rows[0])
        report = cls(columns)
        for row in rows[1:]:
            report.records.append({c: (int(v) if c == "step" else float(v)) for c, v in zip(columns, row)})
        return report


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def check_finite(step: int, losses: dict, grad_norms: dict) -> None:
    bad = [k for k, v in losses.items() if not math.isfinite(v)]
    bad += [k for k, v in grad_norms.items() if not math.isfinite(v)]
    if bad:
        raise TrainingDivergedError(
            f"non-finite values at step {step}: {', '.join(bad)}; losses={losses}; grad norms={grad_norms}"
        )


class Stopwatch:
    def __init__(self):
        self.start = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self.start


def scaled_warmup(steps: int, reference_warmup: int = 300, reference_steps: int = 2000) -> int:
    """Warm-up length that keeps the reference warm-up/steps ratio at a smaller step budget."""
    return int(round(steps * reference_warmup / reference_steps))


def require_columns(report: TrainReport, names: Sequence[str]) -> None:
    missing = [n for n in names if n not in report.columns]
    if missing:
        raise KeyError(f"report lacks columns {missing}")
