"""Experiment configuration and its YAML form."""

from __future__ import annotations

import dataclasses
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .rpn_sim import RPNSimConfig, SceneParams
from .sampler import IntervalConfig, JitterRange, JitterRanges
from .toyhead import TrainHyper


@dataclass
class SceneSetConfig:
    train: int = 150
    test: int = 100
    params: SceneParams = field(default_factory=SceneParams)


@dataclass
class SamplerConfig:
    intervals: IntervalConfig = field(default_factory=IntervalConfig)
    jitter: JitterRanges = field(default_factory=JitterRanges)
    # per (GT, interval); 0 means 40 * samples_per_interval
    max_attempts: int = 0


@dataclass
class TrainingConfig:
    regressor: TrainHyper = field(default_factory=lambda: TrainHyper(lr=0.2, steps=3000, batch_size=128))
    iou: TrainHyper = field(default_factory=lambda: TrainHyper(lr=5.0, steps=4000, batch_size=128))


@dataclass
class InferenceConfig:
    nms_threshold: float = 0.5
    ranking: str = "fused"
    iou_mode: str = "two_pass"


@dataclass
class ExperimentConfig:
    seed: int = 0
    sigma_feat: float = 0.04
    scenes: SceneSetConfig = field(default_factory=SceneSetConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    rpn: RPNSimConfig = field(default_factory=RPNSimConfig)
    rpn_test: RPNSimConfig = field(default_factory=lambda: RPNSimConfig(proposals_per_gt=40,
                                                                        positive_cap=300))
    training: TrainingConfig = field(default_factory=TrainingConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    output_dir: str = "runs/default"

    def to_dict(self) -> dict:
        return _plain(asdict(self))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict | None) -> "ExperimentConfig":
        return _build(cls, d or {})

    @classmethod
    def from_yaml(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(text))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_yaml(Path(path).read_text(encoding="utf-8"))


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(tp, value):
    """Recursively rebuild dataclass ``tp`` from plain data, keeping defaults for missing keys."""
    if tp is JitterRanges:
        ranges = value["ranges"] if isinstance(value, dict) else value
        return JitterRanges(tuple(
            JitterRange(**r) if isinstance(r, dict) else JitterRange(*r) for r in ranges
        ))
    if dataclasses.is_dataclass(tp):
        if not isinstance(value, dict):
            raise ValueError(f"expected a mapping for {tp.__name__}, got {value!r}")
        hints = {f.name: f for f in dataclasses.fields(tp)}
        unknown = set(value) - set(hints)
        if unknown:
            raise ValueError(f"unknown keys for {tp.__name__}: {sorted(unknown)}")
        kwargs = {}
        for name, v in value.items():
            ftype = _field_type(tp, name)
            kwargs[name] = _build(ftype, v) if ftype is not None else _coerce(v)
        return tp(**kwargs)
    return value


_NESTED = {
    ("ExperimentConfig", "scenes"): SceneSetConfig,
    ("ExperimentConfig", "sampler"): SamplerConfig,
    ("ExperimentConfig", "rpn"): RPNSimConfig,
    ("ExperimentConfig", "rpn_test"): RPNSimConfig,
    ("ExperimentConfig", "training"): TrainingConfig,
    ("ExperimentConfig", "inference"): InferenceConfig,
    ("SceneSetConfig", "params"): SceneParams,
    ("SamplerConfig", "intervals"): IntervalConfig,
    ("SamplerConfig", "jitter"): JitterRanges,
    ("TrainingConfig", "regressor"): TrainHyper,
    ("TrainingConfig", "iou"): TrainHyper,
}


def _field_type(tp, name):
    return _NESTED.get((tp.__name__, name))


def _coerce(v):
    return tuple(v) if isinstance(v, list) else v
