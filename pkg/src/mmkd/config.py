"""Run configuration: defaults, YAML loading and validation."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .baselines import Strategy
from .errors import ConfigError

ABLATION_FLAGS = ("no_hard_buffer", "uniform_wr", "uniform_wf", "no_feature_loss")


@dataclass
class DataConfig:
    kind: str = "blobs"  # blobs | idx | cache
    num_classes: int = 10
    per_class: int = 600
    n_in: int = 32
    spread: float | None = None  # None -> data.DEFAULT_SPREAD
    seed: int = 0
    # idx/cache inputs, relative to the data directory
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    image_shape: list[int] | None = None


@dataclass
class DistillConfig:
    strategy: str = "mmkd"
    alpha: float = 1.0
    beta: float = 10.0
    tau: float = 4.0
    inner_steps: int = 1
    meta_period: int = 5
    meta_lr: float = 1e-3
    buffer_capacity: int = 512
    batch_size: int = 64
    epochs: int = 40
    lr: float = 0.05
    lr_milestones: list[int] = field(default_factory=lambda: [25, 35])
    lr_decay: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    grad_clip: float | None = 5.0  # max global grad norm for the live optimizer; None disables
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    teacher_hidden: list[int] = field(default_factory=lambda: [256, 128])
    student_hidden: list[int] = field(default_factory=lambda: [64, 32])
    teacher_seeds: list[int] = field(default_factory=lambda: [100, 101, 102])
    teacher_epochs: int | None = None  # None -> epochs
    teacher_weight_decay: float = 5e-3
    arch: str = "mlp"  # mlp | cnn
    # ablations
    no_hard_buffer: bool = False
    uniform_wr: bool = False
    uniform_wf: bool = False
    no_feature_loss: bool = False
    holdout: bool = False
    holdout_fraction: float = 0.1
    normalize_similarity: bool = False
    # output
    record_wall_clock: bool = False
    log_steps: bool = False
    dump_buffer: bool = False
    plot: bool = False
    data: DataConfig = field(default_factory=DataConfig)

    @property
    def strategy_kind(self) -> Strategy:
        return Strategy.parse(self.strategy)

    @property
    def effective_alpha(self) -> float:
        return 0.0 if self.no_feature_loss else self.alpha

    @property
    def active_ablations(self) -> list[str]:
        return [f for f in ABLATION_FLAGS if getattr(self, f)]

    def validate(self) -> "DistillConfig":
        Strategy.parse(self.strategy)
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("alpha and beta must be nonnegative")
        if not self.tau > 0:
            raise ConfigError("tau must be positive")
        if self.inner_steps < 0:
            raise ConfigError("inner_steps must be nonnegative")
        if self.meta_period < 1:
            raise ConfigError("meta_period must be at least 1")
        if self.meta_lr < 0 or self.lr <= 0:
            raise ConfigError("learning rates: meta_lr >= 0 and lr > 0 required")
        if self.batch_size < 1 or self.buffer_capacity < 1 or self.epochs < 0:
            raise ConfigError("batch_size, buffer_capacity must be positive and epochs nonnegative")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.arch not in ("mlp", "cnn"):
            raise ConfigError(f"unknown arch {self.arch!r}")
        return self

    def replace(self, **changes) -> "DistillConfig":
        return dataclasses.replace(self, **changes).validate()

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)


def _coerce(cls, values: dict[str, Any]):
    """Reject unknown keys and convert scalars to the type of the field's default.

    YAML reads ``1e-3`` as a string, so numeric fields accept numeric strings.
    """
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(values) - set(known)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    out = {}
    for key, val in values.items():
        f = known[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        if val is not None and isinstance(default, (bool, int, float)) and not isinstance(val, bool):
            kind = type(default)
            try:
                if kind is bool:
                    raise ValueError
                val = kind(float(val)) if kind is float else int(val)
            except (TypeError, ValueError):
                raise ConfigError(f"{key}: expected {kind.__name__}, got {val!r}") from None
        elif key == "grad_clip" and val is not None:
            try:
                val = float(val)
            except (TypeError, ValueError):
                raise ConfigError(f"{key}: expected a number or null, got {val!r}") from None
        out[key] = val
    return out


def config_from_dict(values: dict[str, Any]) -> DistillConfig:
    values = dict(values or {})
    data = DataConfig(**_coerce(DataConfig, dict(values.pop("data", None) or {})))
    return DistillConfig(data=data, **_coerce(DistillConfig, values)).validate()


def load_config(path: str | Path | None = None, overrides: dict[str, Any] | None = None) -> DistillConfig:
    """Read a YAML key-value file (optional) and apply flag overrides on top."""
    values: dict[str, Any] = {}
    if path is not None:
        try:
            values = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        if not isinstance(values, dict):
            raise ConfigError(f"{path}: expected a mapping at top level")
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key.startswith("data."):
            values.setdefault("data", {})[key[5:]] = val
        else:
            values[key] = val
    return config_from_dict(values)
