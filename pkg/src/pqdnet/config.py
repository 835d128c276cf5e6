"""Declarative run configuration: one JSON document covering every pipeline stage."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import List, Optional

from .model import ModelConfig
from .signals import DisturbanceClass, TimeBase
from .training import TrainConfig

DEFAULT_SNRS = [None, 40.0, 30.0, 20.0]


def parse_snr(value) -> Optional[float]:
    """None, "inf", "none" and "clean" mean noiseless; anything else is a finite dB value."""
    if value is None:
        return None
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "+inf", "none", "clean", "null"):
            return None
        value = float(value)
    value = float(value)
    if math.isinf(value) and value > 0:
        return None
    if not math.isfinite(value):
        raise ValueError(f"invalid SNR {value!r}")
    return value


def snr_tag(snr: Optional[float]) -> str:
    return "clean" if snr is None else f"snr{snr:g}"


def snr_heading(snr: Optional[float]) -> str:
    return "No noise" if snr is None else f"{snr:g}dB"


@dataclass
class RunConfig:
    seed: int = 0
    sample_rate: float = 3200.0
    duration: float = 0.2
    fundamental_freq: float = 50.0
    classes: Optional[List[str]] = None
    per_class: int = 100
    snr_db: List[Optional[float]] = field(default_factory=lambda: list(DEFAULT_SNRS))
    px: int = 64
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr_max=1e-3, epochs=40))
    out_dir: str = "runs/desk"
    workers: Optional[int] = None

    def timebase(self) -> TimeBase:
        return TimeBase(self.sample_rate, self.duration, self.fundamental_freq)

    def class_list(self) -> List[DisturbanceClass]:
        if self.classes is None:
            return list(DisturbanceClass)
        return [DisturbanceClass.parse(c) for c in self.classes]

    def validate(self) -> "RunConfig":
        self.timebase()
        labels = [c.name for c in self.class_list()]
        if not labels or len(set(labels)) != len(labels):
            raise ValueError("classes must be a non-empty list without repeats")
        self.classes = None if self.classes is None else labels
        if self.per_class < 1:
            raise ValueError("per_class must be >= 1")
        self.snr_db = [parse_snr(s) for s in self.snr_db]
        if not self.snr_db or len(set(self.snr_db)) != len(self.snr_db):
            raise ValueError("snr_db must be a non-empty list without repeats")
        if self.px < 8:
            raise ValueError("px must be >= 8")
        if self.model.input_px != self.px:
            self.model = replace(self.model, input_px=self.px)
        if self.model.num_classes != 18:
            raise ValueError("the classifier head always covers all 18 classes")
        self.model.validate()
        self.train.validate()
        if self.workers is not None and self.workers < 1:
            raise ValueError("workers must be >= 1")
        return self

    def train_config(self) -> TrainConfig:
        """Training settings with the master seed applied."""
        return replace(self.train, seed=self.seed)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "model" in d:
            d["model"] = ModelConfig.from_dict(d["model"])
        if "train" in d:
            d["train"] = TrainConfig.from_dict(d["train"])
        return cls(**d).validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            data = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(data, dict):
            raise ValueError(f"{path}: expected a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["snr_db"] = [None if s is None else s for s in self.snr_db]
        return d

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n")
