"""Exception types shared across the package."""


class PdeSplineError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(PdeSplineError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class NumericalError(PdeSplineError):
    """Numerical failure in a solver or sampler (CLI exit code 3)."""


class DataError(PdeSplineError):
    """Malformed or unusable input data."""
