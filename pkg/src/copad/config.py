"""Run configuration: nested dataclasses loaded from JSON, unknown keys rejected."""
from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Any

from .fusion import KalmanConfig
from .synth import WorldConfig

FUSION_VARIANTS = ("kf", "none", "intermediate-add", "intermediate-concat")
VIEWS = ("cooperative", "vehicle-only", "infra-only")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class FusionSection:
    gate_m: float = 3.0
    process_noise: float = 0.5
    meas_noise_vehicle: float = 0.25
    meas_noise_infra: float = 0.25

    def kalman(self) -> KalmanConfig:
        return KalmanConfig(self.process_noise, self.meas_noise_vehicle, self.meas_noise_infra, self.gate_m)


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    num_gat_layers: int = 2
    num_heads: int = 8
    k_p: int = 5
    pta: bool = True
    pta_query: str = "current"  # or "past"
    radius_vehicle_m: float = 50.0
    radius_pedestrian_m: float = 20.0
    lane_radius_m: float = 10.0
    num_modes: int = 6
    mode_attention: bool = True
    mode_attn_heads: int = 4
    num_anchors: int = 2
    mixer_blocks: int = 2
    t_f: int = 10
    time_enc_dim: int = 8
    pos_scale_m: float = 10.0
    # kf | none | intermediate-add | intermediate-concat
    fusion: str = "kf"

    def __post_init__(self):
        if self.hidden_dim % self.num_heads:
            raise ConfigError("hidden_dim must be divisible by num_heads")
        if self.hidden_dim % self.mode_attn_heads:
            raise ConfigError("hidden_dim must be divisible by mode_attn_heads")
        if self.pta_query not in ("current", "past"):
            raise ConfigError(f"pta_query: {self.pta_query!r}")
        if self.num_anchors not in (0, 1, 2, 3):
            raise ConfigError("num_anchors must be in {0, 1, 2, 3}")
        if self.fusion not in FUSION_VARIANTS:
            raise ConfigError(f"fusion: {self.fusion!r} not in {FUSION_VARIANTS}")
        if self.k_p < 1 or self.num_modes < 1 or self.t_f < 1:
            raise ConfigError("k_p, num_modes, t_f must be >= 1")

    @property
    def intermediate(self) -> bool:
        return self.fusion.startswith("intermediate")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    batch_size: int = 8
    lr0: float = 3e-4
    weight_decay: float = 1e-4
    dropout: float = 0.1
    alpha: float = 0.5
    huber_delta: float = 1.0
    reg_mode: str = "wta"  # or "mixture"
    view: str = "cooperative"
    seed: int = 0

    def __post_init__(self):
        if self.reg_mode not in ("wta", "mixture"):
            raise ConfigError(f"reg_mode: {self.reg_mode!r}")
        if self.view not in VIEWS:
            raise ConfigError(f"view: {self.view!r}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs >= 0 and batch_size >= 1 required")


@dataclass(frozen=True)
class EvalConfig:
    view: str = "cooperative"
    miss_threshold_m: float = 2.0

    def __post_init__(self):
        if self.view not in VIEWS:
            raise ConfigError(f"view: {self.view!r}")


@dataclass(frozen=True)
class RunConfig:
    synth: WorldConfig = field(default_factory=WorldConfig)
    fusion: FusionSection = field(default_factory=FusionSection)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


_SECTIONS = {"synth": WorldConfig, "fusion": FusionSection, "model": ModelConfig, "train": TrainConfig, "eval": EvalConfig}


def _coerce(value: Any, default: Any) -> Any:
    if isinstance(default, tuple) or (default is None and isinstance(value, list)):
        return tuple(value) if value is not None else None
    return value


def _section(cls, data: dict, name: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{name}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"{name}: unknown keys {sorted(unknown)}")
    defaults = cls()
    kwargs = {k: _coerce(v, getattr(defaults, k)) for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{name}: {e}") from e


def config_from_dict(data: dict) -> RunConfig:
    if not isinstance(data, dict):
        raise ConfigError("config: expected a JSON object")
    unknown = set(data) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"config: unknown sections {sorted(unknown)}")
    return RunConfig(**{name: _section(cls, data.get(name, {}), name) for name, cls in _SECTIONS.items()})


def config_to_dict(cfg: RunConfig) -> dict:
    def conv(v):
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        return v

    return {name: {k: conv(v) for k, v in dataclasses.asdict(getattr(cfg, name)).items()} for name in _SECTIONS}


def load_config(path: str | os.PathLike) -> RunConfig:
    with open(path, "r", encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: malformed JSON ({e.msg})") from e
    return config_from_dict(data)


def model_from_dict(data: dict) -> ModelConfig:
    return _section(ModelConfig, data, "model")
