"""Query-as-cluster-center segmentation with query-level OOD localization,
exercised end to end on deterministic synthetic phantom volumes."""

from . import losses, metrics, model, oodscore, synthdata
from .errors import (
    CheckpointError,
    ConfigError,
    DataError,
    DegenerateInputError,
    GeometryError,
    NonFiniteLossError,
    QuerysegError,
    ShapeError,
)

__version__ = "0.1.0"

__all__ = [
    "losses",
    "metrics",
    "model",
    "oodscore",
    "synthdata",
    "QuerysegError",
    "ConfigError",
    "GeometryError",
    "ShapeError",
    "DegenerateInputError",
    "NonFiniteLossError",
    "DataError",
    "CheckpointError",
    "__version__",
]
