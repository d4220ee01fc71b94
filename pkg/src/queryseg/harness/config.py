"""Experiment configuration: one JSON-serializable tree of dataclasses.

The canonical serialization (sorted keys, no whitespace) is hashed with
SHA-256; run records store both the serialized config and its hash so a
record can always be checked against the exact bytes that produced it.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path

from ..errors import ConfigError
from ..model import ModelConfig
from ..oodscore import SCORE_METHODS
from ..synthdata import PhantomSpec

__all__ = [
    "ModelSettings",
    "LossSettings",
    "OptimSettings",
    "SplitSettings",
    "ExperimentConfig",
    "default_config",
    "config_hash",
    "output_root",
]

OUTPUT_ROOT_ENV = "QUERYSEG_OUTPUT_ROOT"


@dataclass(frozen=True)
class ModelSettings:
    """Architecture knobs; grid and class count come from the phantom spec."""

    num_queries: int = 32
    partition: tuple[int, int, int] = (16, 4, 12)
    embed_dim: int = 128
    base_width: int = 32
    levels: int = 3
    block_strides: tuple[int, ...] = (4, 2)
    attn_heads: int = 8
    ffn_mult: int = 4


@dataclass(frozen=True)
class LossSettings:
    qd_weight: float = 0.1
    ds_weight: float = 0.1

    def __post_init__(self):
        if self.qd_weight < 0 or self.ds_weight < 0:
            raise ConfigError("loss weights must be non-negative")


@dataclass(frozen=True)
class OptimSettings:
    learning_rate: float = 3e-4
    epochs_phase1: int = 40
    epochs_phase2: int = 40
    batch_size: int = 4
    seed: int = 0
    two_phase: bool = True
    freeze_fraction: float = 0.25  # share of phase-2 epochs with frozen backbone
    backbone_lr_multiplier: float = 0.1
    poly_decay: bool = True
    poly_power: float = 0.9
    augment: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0:
            raise ConfigError("epoch counts must be non-negative")
        if not (0.0 <= self.freeze_fraction <= 1.0):
            raise ConfigError("freeze_fraction must lie in [0, 1]")


@dataclass(frozen=True)
class SplitSettings:
    n_train: int = 24
    n_val: int = 6
    n_test_inlier: int = 6
    n_test_ood: int = 6


@dataclass(frozen=True)
class ExperimentConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    model: ModelSettings = field(default_factory=ModelSettings)
    loss: LossSettings = field(default_factory=LossSettings)
    optim: OptimSettings = field(default_factory=OptimSettings)
    split: SplitSettings = field(default_factory=SplitSettings)
    eval_methods: tuple[str, ...] = SCORE_METHODS
    output_dir: str = "runs/default"
    tag: str = "default"

    def __post_init__(self):
        if sum(self.model.partition) != self.model.num_queries:
            raise ConfigError(
                f"partition {self.model.partition} must sum to {self.model.num_queries} queries"
            )
        unknown = set(self.eval_methods) - set(SCORE_METHODS)
        if unknown:
            raise ConfigError(f"unknown score methods: {sorted(unknown)}")

    def model_config(self) -> ModelConfig:
        return ModelConfig(
            grid=self.phantom.shape,
            num_classes=self.phantom.num_classes_train,
            num_queries=self.model.num_queries,
            partition=self.model.partition,
            embed_dim=self.model.embed_dim,
            base_width=self.model.base_width,
            levels=self.model.levels,
            block_strides=self.model.block_strides,
            attn_heads=self.model.attn_heads,
            ffn_mult=self.model.ffn_mult,
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, raw: dict) -> "ExperimentConfig":
        base = asdict(cls())
        # Textures are derived from the class counts unless given explicitly;
        # merging the materialized defaults would pin them to the old counts.
        base["phantom"]["textures"] = []
        merged = _deep_update(base, raw)
        return cls(
            phantom=PhantomSpec.from_dict(merged["phantom"]),
            model=ModelSettings(**_tupled(merged["model"], "partition", "block_strides")),
            loss=LossSettings(**merged["loss"]),
            optim=OptimSettings(**merged["optim"]),
            split=SplitSettings(**merged["split"]),
            eval_methods=tuple(merged["eval_methods"]),
            output_dir=merged["output_dir"],
            tag=merged["tag"],
        )

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_dict(json.loads(text))

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            return cls.from_json(path.read_text())
        except (json.JSONDecodeError, TypeError, KeyError) as err:
            raise ConfigError(f"cannot parse config {path}: {err}") from err


def _tupled(raw: dict, *keys: str) -> dict:
    out = dict(raw)
    for key in keys:
        out[key] = tuple(out[key])
    return out


def _deep_update(base: dict, patch: dict) -> dict:
    for key, value in patch.items():
        if key in base and isinstance(base[key], dict) and isinstance(value, dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base


def default_config(**overrides) -> ExperimentConfig:
    return ExperimentConfig.from_dict(overrides)


def config_hash(config: ExperimentConfig) -> str:
    return hashlib.sha256(config.to_json().encode()).hexdigest()


def output_root(explicit: str | None = None) -> Path:
    """CLI output root: explicit flag, else $QUERYSEG_OUTPUT_ROOT, else cwd."""
    if explicit:
        return Path(explicit)
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "."))
