"""Run configuration: one YAML document covering every tunable.

Unknown keys are rejected so typos fail loudly; every run can log the
resolved config fingerprint for reproducibility.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import yaml

from .model import ModelConfig

ENV_CONFIG = "DENTDET_CONFIG"


@dataclass(frozen=True)
class ScheduleConfig:
    timesteps: int = 1000
    s: float = 0.008
    steps: int = 1  # sampling steps at inference
    eta: float = 1.0  # stochasticity of multi-step sampling; moot when steps=1

    def __post_init__(self):
        if self.timesteps < 1:
            raise ValueError("timesteps must be >= 1")
        if not 1 <= self.steps <= 8:
            raise ValueError("sampling steps must lie in 1..8")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    batch_size: int = 8
    lr: float = 2e-3
    n_proposals: int = 64
    seed: int = 0
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    warmup: int = 0
    augment: bool = False


@dataclass(frozen=True)
class InferConfig:
    nms_iou: float = 0.5
    renewal_threshold: float = 0.5
    cache_threshold: float = 0.5
    manip_noise_t: int = 0  # 0 = insert inferred boxes clean


@dataclass(frozen=True)
class DataConfig:
    dir: str = "dataset"
    size: int = 256
    count: int = 64


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def fingerprint(self) -> str:
        return hashlib.sha256(
            json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        ).hexdigest()[:16]


def _build(cls, values: dict, path: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(values) - names
    if unknown:
        raise ValueError(
            f"unknown config keys at {path or 'top level'}: {sorted(unknown)}"
        )
    return cls(**values)


_SECTIONS = {
    "model": ModelConfig,
    "schedule": ScheduleConfig,
    "train": TrainConfig,
    "infer": InferConfig,
    "data": DataConfig,
}


def load_config(path=None) -> RunConfig:
    """Load a RunConfig from YAML; defaults apply for absent keys.

    With no path, honors the DENTDET_CONFIG environment variable, falling
    back to all defaults.
    """
    if path is None:
        path = os.environ.get(ENV_CONFIG)
    if path is None:
        return RunConfig()
    with open(path, "r", encoding="utf-8") as f:
        doc = yaml.safe_load(f) or {}
    if not isinstance(doc, dict):
        raise ValueError("config document must be a mapping")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections: {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        if name in doc:
            if not isinstance(doc[name], dict):
                raise ValueError(f"config section {name} must be a mapping")
            kwargs[name] = _build(cls, doc[name], f"{name}.")
    return RunConfig(**kwargs)
