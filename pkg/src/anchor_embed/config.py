"""Run configuration: one JSON document holding every knob of an experiment."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from .data import SyntheticSpec
from .model import ModelConfig
from .stage1 import Stage1Config
from .stage2 import AdapterConfig, Stage2Config


@dataclass
class DataConfig:
    count: int = 2000
    split: tuple[float, float] = (0.8, 0.2)
    seed: int = 0
    synthetic: SyntheticSpec = field(default_factory=SyntheticSpec)

    def __post_init__(self):
        self.split = tuple(float(f) for f in self.split)
        if isinstance(self.synthetic, dict):
            self.synthetic = SyntheticSpec.from_dict(self.synthetic)
        if self.count < 2:
            raise ValueError(f"count must be at least 2, got {self.count}")
        if len(self.split) != 2 or abs(sum(self.split) - 1.0) > 1e-9 or min(self.split) <= 0:
            raise ValueError(f"split must be two positive fractions summing to 1, got {self.split}")

    def to_dict(self) -> dict:
        return {"count": self.count, "split": list(self.split), "seed": self.seed, "synthetic": self.synthetic.to_dict()}


@dataclass
class EvalConfig:
    batch_size: int = 32
    max_queries: Optional[int] = None

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("eval batch_size must be positive")
        if self.max_queries is not None and self.max_queries < 1:
            raise ValueError("max_queries must be positive when set")

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "model": ModelConfig,
    "stage1": Stage1Config,
    "stage2": Stage2Config,
    "data": DataConfig,
    "eval": EvalConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    stage1: Stage1Config = field(default_factory=Stage1Config)
    stage2: Stage2Config = field(default_factory=Stage2Config)
    data: DataConfig = field(default_factory=DataConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    out_dir: str = "runs/default"
    seed: int = 0

    def to_dict(self) -> dict:
        out = {name: getattr(self, name).to_dict() for name in _SECTIONS}
        out["out_dir"] = self.out_dir
        out["seed"] = self.seed
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        unknown = set(data) - set(_SECTIONS) - {"out_dir", "seed"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, kind in _SECTIONS.items():
            if name in data:
                section = data[name]
                if not isinstance(section, dict):
                    raise ValueError(f"config section {name!r} must be an object")
                kwargs[name] = kind.from_dict(section) if hasattr(kind, "from_dict") else kind(**section)
        for name in ("out_dir", "seed"):
            if name in data:
                kwargs[name] = data[name]
        return cls(**kwargs)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ValueError(f"cannot read config {path}: {exc.strerror}") from exc
        try:
            return cls.from_json(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc

    def with_overrides(
        self,
        seed: Optional[int] = None,
        out_dir: Optional[str] = None,
        alpha: Optional[float] = None,
        tau: Optional[float] = None,
        stage1_steps: Optional[int] = None,
        stage2_steps: Optional[int] = None,
        adapter_rank: Optional[int] = None,
    ) -> "RunConfig":
        """A new config with command-line overrides applied.

        ``seed`` is the global seed; it also seeds both trainers so a single
        flag reproduces a whole run.
        """
        data = self.to_dict()
        if seed is not None:
            data["seed"] = seed
            data["stage1"]["seed"] = seed
            data["stage2"]["seed"] = seed
        if out_dir is not None:
            data["out_dir"] = str(out_dir)
        if alpha is not None:
            data["stage1"]["alpha"] = alpha
        if tau is not None:
            data["stage2"]["temperature"] = tau
        if stage1_steps is not None:
            data["stage1"]["steps"] = stage1_steps
            data["stage1"]["warmup_steps"] = min(data["stage1"]["warmup_steps"], stage1_steps)
        if stage2_steps is not None:
            data["stage2"]["steps"] = stage2_steps
            data["stage2"]["warmup_steps"] = min(data["stage2"]["warmup_steps"], stage2_steps)
        if adapter_rank is not None:
            if adapter_rank == 0:
                data["stage2"]["adapter"] = None
            else:
                adapter = data["stage2"]["adapter"] or AdapterConfig().to_dict()
                adapter["rank"] = adapter_rank
                data["stage2"]["adapter"] = adapter
        return RunConfig.from_dict(data)
