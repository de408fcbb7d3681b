"""Exception types shared across the package.

The CLI maps each one to a stable exit code.
"""


class ConfigurationError(ValueError):
    """Invalid shapes, flags or hyperparameters."""


class DataError(ValueError):
    """Malformed or insufficient input data."""


class NumericalError(ArithmeticError):
    """Non-finite values encountered during training."""
