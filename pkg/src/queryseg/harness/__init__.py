"""Experiment orchestration: configs, training, evaluation, ablations, reports."""

from .config import (
    ExperimentConfig,
    LossSettings,
    ModelSettings,
    OptimSettings,
    SplitSettings,
    config_hash,
    default_config,
)
from .train import RunRecord, train
from .evaluate import evaluate
from .ablate import ablate
from .report import export_report

__all__ = [
    "ExperimentConfig",
    "ModelSettings",
    "LossSettings",
    "OptimSettings",
    "SplitSettings",
    "default_config",
    "config_hash",
    "RunRecord",
    "train",
    "evaluate",
    "ablate",
    "export_report",
]
