"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration, spec or modality/corruption combination."""


class ShapeError(ValueError):
    """Array dimensions do not match what an operation expects."""


class NumericalError(ArithmeticError):
    """A non-finite value showed up where a finite one is required."""


class UsageError(RuntimeError):
    """An API was called in the wrong state (e.g. sampling an underfull buffer)."""
