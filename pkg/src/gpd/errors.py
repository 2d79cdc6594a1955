"""Exception types shared across the package."""


class GpdError(Exception):
    """Base class for all package errors."""


class ShapeError(GpdError, ValueError):
    """Tensor or layer dimensions are inconsistent."""


class NumericError(GpdError, ValueError):
    """Non-finite values encountered at an operation boundary."""


class CheckpointError(GpdError, ValueError):
    """Checkpoint file is corrupt, truncated, or of the wrong version."""


class ConfigError(GpdError, ValueError):
    """Run configuration is malformed or contains unknown keys."""


class DataFormatError(GpdError, ValueError):
    """Dataset file violates its declared format."""
