"""Exception types shared across the package."""


class AvsepError(Exception):
    """Base class for all package errors."""


class ValidationError(AvsepError, ValueError):
    """An input violates a documented contract (shape, range, finiteness)."""


class LengthError(ValidationError):
    """An audio clip is too short for the requested transform."""


class ConfigError(AvsepError, ValueError):
    """Inconsistent or unknown configuration."""


class DegenerateInputError(AvsepError, ValueError):
    """Metric inputs carry no usable energy (zero reference)."""


class ConditioningError(DegenerateInputError):
    """Reference signals are (numerically) linearly dependent."""


class DataError(AvsepError):
    """Corpus or manifest is missing or corrupt."""


class TrainingDivergedError(AvsepError, FloatingPointError):
    """Loss became non-finite during training."""
