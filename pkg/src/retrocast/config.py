"""Experiment configuration: dataclasses plus strict YAML round-tripping.

Unknown keys in a config file are rejected rather than ignored, so typos
fail loudly. Every reported number is a pure function of (config, seed).
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .synthscene import SceneConfig


class ConfigError(ValueError):
    """Raised for unknown keys, bad values, or inconsistent horizons."""


PAST_MOTION_MODES = ("appearance_guided", "no_guidance", "constant_velocity")


@dataclass(frozen=True)
class ModelConfig:
    n_queries: int = 32
    embed_dim: int = 64
    n_hypotheses: int = 4
    n_modes: int = 6
    n_layers_detector: int = 3
    n_layers_forecaster: int = 2
    n_heads: int = 4
    n_offsets: int = 4
    past_motion_mode: str = "appearance_guided"
    hypothesis_turn_rate: float = 0.3   # curvature prior spread (rad/s)
    past_cross_attention: bool = True
    query_init_weights: bool = True
    query_init_object: bool = True

    def __post_init__(self):
        if self.past_motion_mode not in PAST_MOTION_MODES:
            raise ConfigError(
                f"past_motion_mode must be one of {PAST_MOTION_MODES}, "
                f"got {self.past_motion_mode!r}"
            )
        if self.embed_dim % self.n_heads != 0:
            raise ConfigError(
                f"embed_dim {self.embed_dim} not divisible by n_heads {self.n_heads}"
            )


@dataclass(frozen=True)
class LossConfig:
    lambda_past: float = 0.2
    lambda_future: float = 0.1
    tau_past: float = 1.0       # past scoring target sharpness (meters)
    tau_future: float = 2.0     # future soft-target temperature (meters)
    gate_distance: float = 1.0  # center-distance gate for trajectory losses
    epa_alpha: float = 0.5
    no_object_weight: float = 0.5


@dataclass(frozen=True)
class OptimConfig:
    steps: int = 2000
    learning_rate: float = 2e-3
    lr_schedule: str = "constant"   # "constant" or "cosine"
    lr_final_ratio: float = 0.1     # final/peak lr under the cosine schedule
    grad_clip: float = 5.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_interval: int = 1000
    teacher_forcing: bool = True

    def __post_init__(self):
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(
                f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}"
            )

    def lr_at(self, step: int) -> float:
        """Learning rate for a given optimizer step."""
        if self.lr_schedule == "constant" or self.steps <= 1:
            return self.learning_rate
        frac = step / (self.steps - 1)
        lo = self.learning_rate * self.lr_final_ratio
        return lo + 0.5 * (self.learning_rate - lo) * (1 + math.cos(math.pi * frac))


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneConfig = field(default_factory=SceneConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    n_train_scenes: int = 1000
    n_eval_scenes: int = 100
    train_seed_start: int = 10_000
    eval_seed_start: int = 900_000
    seed: int = 0
    confidence_threshold: float = 0.4

    def hash(self) -> str:
        import hashlib
        import json

        blob = json.dumps(asdict(self), sort_keys=True, default=float).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _from_dict(cls, data: dict, path: str = ""):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected a mapping, got {type(data).__name__}")
    known = {f.name: f for f in fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path or cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        f = known[name]
        if dataclasses.is_dataclass(f.type) or f.type in (SceneConfig, ModelConfig, LossConfig, OptimConfig):
            kwargs[name] = _from_dict(f.type, value, f"{path}{name}.")
        elif isinstance(value, list) and "tuple" in str(f.type):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    # dataclass field types are strings under `from __future__ import annotations`
    # in synthscene; resolve nested sections explicitly
    section_types = {"scene": SceneConfig, "model": ModelConfig,
                     "loss": LossConfig, "optim": OptimConfig}
    known = {f.name for f in fields(ExperimentConfig)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown top-level keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if name in section_types:
            kwargs[name] = _from_dict(section_types[name], value, f"{name}.")
        else:
            kwargs[name] = value
    return ExperimentConfig(**kwargs)


def load_config(path) -> ExperimentConfig:
    text = Path(path).read_text()
    data = yaml.safe_load(text)
    if data is None:
        data = {}
    return config_from_dict(data)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(asdict(cfg), sort_keys=False))


def with_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """Functional update by nested field path, e.g. {"model.n_heads": 2}."""
    data = asdict(cfg)
    for dotted, value in overrides.items():
        node = data
        *parents, leaf = dotted.split(".")
        for p in parents:
            if p not in node:
                raise ConfigError(f"unknown override path: {dotted}")
            node = node[p]
        if leaf not in node:
            raise ConfigError(f"unknown override path: {dotted}")
        node[leaf] = value
    return config_from_dict(data)
