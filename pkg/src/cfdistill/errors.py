"""Exception types shared across the package."""


class DataError(ValueError):
    """Raised for malformed or degenerate dataset content."""


class ConfigError(ValueError):
    """Raised for invalid or incomplete run configuration."""


class TrainingDiverged(RuntimeError):
    """Raised when a loss or parameter tensor stops being finite."""
