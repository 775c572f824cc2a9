"""Exception hierarchy shared across the package."""


class RegCopulaError(Exception):
    """Base class for package errors."""


class ConfigurationError(RegCopulaError):
    """Invalid configuration, dimensions, or option combinations."""


class DataError(RegCopulaError):
    """Malformed or out-of-contract input data."""


class ExtrapolationError(DataError):
    """A value falls outside a fitted grid or training range."""


class NumericalError(RegCopulaError):
    """A numerical routine failed (factorization, non-PD matrix, divergence)."""
