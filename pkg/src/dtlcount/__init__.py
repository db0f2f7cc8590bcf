"""Disentangled cross-domain cell counting: tensors, models, synthesis, transfer."""

__version__ = "0.1.0"

from .errors import (CheckpointFormatError, ConfigError, DataError, DtlError,
                     GradientError, ShapeError)

__all__ = [
    "CheckpointFormatError",
    "ConfigError",
    "DataError",
    "DtlError",
    "GradientError",
    "ShapeError",
    "__version__",
]
