"""Exception types raised across the package."""
from typing import Optional


class GladaError(Exception):
    """Base class for all package errors."""


class DatasetFormatError(GladaError, ValueError):
    """Dataset directory or in-memory dataset violates the container contract."""


class ConfigError(GladaError, ValueError):
    """Invalid hyperparameters or scenario configuration."""


class ShapeError(GladaError, ValueError):
    """Array/tensor shape or role does not match what the operation expects."""


class EmptyLabeledSetError(GladaError):
    """No labeled target samples are available where some are required."""


class NonFiniteError(GladaError, FloatingPointError):
    """NaN/Inf in a loss or gradient; the offending batch is rejected."""


class StageError(GladaError):
    """Failure inside one run_scenario stage; the original error is chained as __cause__."""

    def __init__(self, stage: str, message: Optional[str] = None):
        self.stage = stage
        super().__init__(f"stage '{stage}' failed" + (f": {message}" if message else ""))


class ProbabilityRangeError(GladaError, ValueError):
    """Discriminator outputs outside [0, 1] passed to an adversarial loss."""
