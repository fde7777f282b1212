"""Declarative experiment configuration (JSON file plus CLI overrides)."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

from ..errors import ConfigError
from ..forecaster import MODES, TrainConfig
from ..transformer import TransformerConfig

MASK_PRESETS = ("first_quarter", "middle_quarter", "last_quarter", "all")


@dataclass
class DatasetSpec:
    path: str | None = None  # None means the seeded synthetic generator
    name: str = "synthetic"
    frequency: str = "hourly"
    synthetic_length: int = 2000
    synthetic_vars: int = 3
    synthetic_seed: int = 0
    synthetic_period: int = 24
    ratios: tuple[float, float, float] = (0.7, 0.1, 0.2)


@dataclass
class BackboneSpec:
    num_layers: int = 4
    model_width: int = 64
    num_heads: int = 4
    ff_width: int = 128
    max_sequence_length: int = 512
    seed: int = 0

    def transformer_config(self) -> TransformerConfig:
        return TransformerConfig(
            num_layers=self.num_layers,
            model_width=self.model_width,
            num_heads=self.num_heads,
            ff_width=self.ff_width,
            max_sequence_length=self.max_sequence_length,
        )


@dataclass
class SamplingSpec:
    fraction: float | None = None
    count: int | None = 16  # examples behind the vector_icl context
    prompt_count: int = 4  # examples rendered into the prompt_icl prefix
    seeds: list[int] = field(default_factory=lambda: [0, 1])  # one example set per seed
    orderings: int = 2
    stride: int = 1


@dataclass
class TrainSpec:
    lr: float = 3e-5
    max_epochs: int = 40
    patience: int = 3
    batch_size: int = 32
    max_steps_per_epoch: int | None = None
    prompt_epochs: int = 3
    full_ft_lr: float | None = None
    full_ft_epochs: int | None = None

    def train_config(self) -> TrainConfig:
        return TrainConfig(self.lr, self.max_epochs, self.patience, self.batch_size, max_steps_per_epoch=self.max_steps_per_epoch)

    def prompt_config(self) -> TrainConfig:
        return dataclasses.replace(self.train_config(), max_epochs=self.prompt_epochs)

    def full_ft_config(self) -> TrainConfig:
        return dataclasses.replace(
            self.train_config(),
            lr=self.full_ft_lr if self.full_ft_lr is not None else self.lr,
            max_epochs=self.full_ft_epochs if self.full_ft_epochs is not None else self.max_epochs,
        )


@dataclass
class ExperimentConfig:
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    history_len: int = 96
    horizons: list[int] = field(default_factory=lambda: [24])
    patch_len: int = 8
    backbone: BackboneSpec = field(default_factory=BackboneSpec)
    modes: list[str] = field(default_factory=lambda: ["no_icl", "vector_icl"])
    seeds: list[int] = field(default_factory=lambda: [1, 2, 3, 4, 5])
    sampling: SamplingSpec = field(default_factory=SamplingSpec)
    adapter: str = "fc"
    per_layer_adapter: bool = False
    layer_mask: str = "all"
    train: TrainSpec = field(default_factory=TrainSpec)
    train_stride: int = 1
    eval_stride: int | None = None  # None means one horizon
    fraction_grid: list[float] = field(default_factory=lambda: [0.01, 0.05, 0.1, 0.2])
    efficiency_counts: list[int] = field(default_factory=lambda: [1, 2, 4, 8])
    efficiency_windows: int = 8
    mi_counts: list[int] = field(default_factory=lambda: [1, 4, 16, 64])
    mi_trials: int = 20
    mi_bins: int = 16
    output_dir: str = "lvicl_out"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if not self.sampling.seeds:
            raise ConfigError("sampling.seeds must be non-empty")
        if not self.horizons or any(h < 1 for h in self.horizons):
            raise ConfigError(f"horizons must be positive, got {self.horizons}")
        if self.patch_len < 1 or self.history_len % self.patch_len:
            raise ConfigError(f"history_len {self.history_len} must be divisible by patch_len {self.patch_len}")
        for mode in self.modes:
            if mode not in MODES:
                raise ConfigError(f"unknown mode {mode!r}; choose from {MODES}")
        if self.layer_mask not in MASK_PRESETS:
            raise ConfigError(f"unknown layer-mask preset {self.layer_mask!r}; choose from {MASK_PRESETS}")
        if self.sampling.orderings < 1:
            raise ConfigError("sampling.orderings must be >= 1")
        if any(not 0.0 <= f <= 0.2 for f in self.fraction_grid):
            raise ConfigError(f"fraction grid must lie in [0, 0.2], got {self.fraction_grid}")
        self.backbone.transformer_config()  # raises on inconsistent widths
        layer_mask(self.layer_mask, self.backbone.num_layers)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        try:
            return _build(cls, data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def hash(self) -> str:
        """Hash of everything that affects results (the output directory does not)."""
        d = self.to_dict()
        d.pop("output_dir")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


_NESTED = {"dataset": DatasetSpec, "backbone": BackboneSpec, "sampling": SamplingSpec, "train": TrainSpec}


def _build(cls, data: dict[str, Any]):
    if not isinstance(data, dict):
        raise ConfigError(f"expected an object for {cls.__name__}, got {type(data).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if cls is ExperimentConfig and key in _NESTED:
            value = _build(_NESTED[key], value)
        elif key == "ratios":
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return ExperimentConfig()
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return ExperimentConfig.from_dict(data)


def apply_overrides(cfg: ExperimentConfig, **overrides) -> ExperimentConfig:
    """CLI overrides; ``None`` values are ignored."""
    d = cfg.to_dict()
    if overrides.get("seeds") is not None:
        d["seeds"] = list(overrides["seeds"])
    if overrides.get("modes") is not None:
        d["modes"] = list(overrides["modes"])
    if overrides.get("horizons") is not None:
        d["horizons"] = list(overrides["horizons"])
    if overrides.get("dataset") is not None:
        d["dataset"]["path"] = overrides["dataset"]
        d["dataset"]["name"] = Path(overrides["dataset"]).stem
    if overrides.get("output_dir") is not None:
        d["output_dir"] = str(overrides["output_dir"])
    return ExperimentConfig.from_dict(d)


def layer_mask(preset: str, num_layers: int) -> tuple[bool, ...]:
    """Quarter presets use ``q = max(1, floor(L/4))`` layers."""
    if preset not in MASK_PRESETS:
        raise ConfigError(f"unknown layer-mask preset {preset!r}")
    L = num_layers
    if preset == "all":
        return (True,) * L
    q = max(1, L // 4)
    start = {"first_quarter": 0, "middle_quarter": (L - q) // 2, "last_quarter": L - q}[preset]
    return tuple(start <= l < start + q for l in range(L))
