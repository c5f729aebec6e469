"""Exception types shared across the package."""


class ShapeMismatchError(ValueError):
    """Operands have incompatible shapes; the message carries both shapes."""


class DegenerateInputError(ValueError):
    """Input is numerically degenerate (zero-norm row, non-stochastic row, ...)."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class DataError(ValueError):
    """Malformed or misaligned data on disk."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where only finite values are allowed."""
