"""Run configuration: one JSON document covering data generation, model
shape, optimization, and evaluation. Unknown keys are rejected so typos fail
loudly, and the canonical serialized form is embedded in every artifact the
pipeline writes (checkpoints, reports, manifests)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .attention import AttentionConfig
from .backbone import BackboneConfig
from .detector import FusionMode
from .errors import ValidationError
from .synthdata import VolumeConfig

__all__ = ["DataConfig", "OptimizerConfig", "FusionAttentionConfig",
           "RunConfig", "config_to_dict", "config_from_dict", "load_config"]


@dataclass(frozen=True)
class DataConfig:
    num_train: int = 200
    num_val: int = 30
    num_test: int = 30
    volume: VolumeConfig = field(default_factory=VolumeConfig)


@dataclass(frozen=True)
class OptimizerConfig:
    name: str = "adamw"
    learning_rate: float = 1e-4
    weight_decay: float = 0.05
    momentum: float = 0.9


@dataclass(frozen=True)
class FusionAttentionConfig:
    """Attention settings for the per-level fusion module (channels are
    fixed by the pyramid)."""

    heads: int = 4
    window: int = 4
    use_relative_bias: bool = True
    mlp_ratio: float = 2.0

    def build(self, channels: int) -> AttentionConfig:
        return AttentionConfig(channels=channels, heads=self.heads,
                               window=self.window,
                               use_relative_bias=self.use_relative_bias,
                               mlp_ratio=self.mlp_ratio)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    fusion: str = "none"
    slice_span: int = 3          # T: slices fused per prediction
    input_span: int = 5          # slices materialized per training step
    epochs: int = 10
    steps_per_epoch: int = 120   # slice windows sampled per epoch (0 = all)
    score_threshold: float = 0.05
    data_dir: str = "data"       # dataset root used by train/eval
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    fusion_attention: FusionAttentionConfig = field(default_factory=FusionAttentionConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        if self.slice_span % 2 != 1 or self.slice_span < 1:
            raise ValidationError("slice_span must be odd and positive")
        if self.input_span < self.slice_span or self.input_span % 2 != 1:
            raise ValidationError("input_span must be odd and >= slice_span")
        if self.fusion not in [m.value for m in FusionMode]:
            raise ValidationError(
                f"fusion must be one of {[m.value for m in FusionMode]}, "
                f"got {self.fusion!r}"
            )
        if self.epochs < 1:
            raise ValidationError("epochs must be >= 1")

    @property
    def fusion_mode(self) -> FusionMode:
        return FusionMode(self.fusion)


_NESTED = {
    "backbone": BackboneConfig,
    "fusion_attention": FusionAttentionConfig,
    "optimizer": OptimizerConfig,
    "data": DataConfig,
    "volume": VolumeConfig,
}


def _dataclass_from_dict(cls, payload: dict, path: str):
    if not isinstance(payload, dict):
        raise ValidationError(f"{path}: expected an object, got {type(payload).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - set(names))
    if unknown:
        raise ValidationError(f"{path}: unknown keys {unknown}")
    kwargs = {}
    for key, value in payload.items():
        f = names[key]
        if key in _NESTED and isinstance(value, dict):
            kwargs[key] = _dataclass_from_dict(_NESTED[key], value, f"{path}.{key}")
        elif isinstance(value, list) and isinstance(f.default, tuple):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        if isinstance(e, ValidationError):
            raise
        raise ValidationError(f"{path}: {e}")


def config_from_dict(payload: dict) -> RunConfig:
    return _dataclass_from_dict(RunConfig, payload, "config")


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _to_jsonable(getattr(obj, f.name))
                for f in dataclasses.fields(obj)}
    if isinstance(obj, tuple):
        return [_to_jsonable(v) for v in obj]
    return obj


def config_to_dict(config: RunConfig) -> dict:
    return _to_jsonable(config)


def load_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as f:
            payload = json.load(f)
    except OSError as e:
        raise ValidationError(f"cannot read config {path}: {e}")
    except json.JSONDecodeError as e:
        raise ValidationError(f"config {path} is not valid JSON: {e}")
    return config_from_dict(payload)
