"""Exception hierarchy shared across the package."""


class PlatesamError(Exception):
    """Base class for all package errors."""


class ConfigurationError(PlatesamError):
    """Inconsistent model/plan configuration (bad dims, double injection, ...)."""


class ValidationError(PlatesamError):
    """Invalid user-supplied input: prompts, datasets, CLI arguments."""


class CheckpointError(PlatesamError):
    """Checkpoint archive is malformed or does not match the target model."""


class NumericalError(PlatesamError):
    """Training diverged (non-finite loss or gradients)."""
