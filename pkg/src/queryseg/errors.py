"""Exception hierarchy shared across the package.

The CLI maps each category to a distinct exit code, so new exceptions
should subclass one of these rather than raising bare ValueError from
user-facing paths.
"""


class QuerysegError(Exception):
    """Base class for all package errors."""


class ConfigError(QuerysegError):
    """Invalid configuration or specification parameters."""


class GeometryError(QuerysegError):
    """Phantom geometry cannot be realized (organ does not fit, lesion
    placement exhausted its retry budget, ...)."""


class ShapeError(QuerysegError):
    """Tensor shapes do not conform to the documented contract."""


class DegenerateInputError(QuerysegError):
    """Input admits no well-defined answer (single-class labels for a
    ranking metric, constant score map for min-max normalization)."""


class NonFiniteLossError(QuerysegError):
    """Training produced a NaN/Inf loss; carries the path of the dumped
    diagnostic batch."""

    def __init__(self, message: str, dump_path: str | None = None):
        super().__init__(message)
        self.dump_path = dump_path


class DataError(QuerysegError):
    """Dataset files or manifest partitions are missing or inconsistent."""


class CheckpointError(QuerysegError):
    """Checkpoint file is unreadable or incompatible."""
