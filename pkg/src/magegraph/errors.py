"""Exception types shared across the package."""


class MageGraphError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class ShapeError(MageGraphError, ValueError):
    """Operand shapes are incompatible."""


class DataError(MageGraphError, ValueError):
    """Input data violates a documented contract (range, schema, class balance)."""


class ParameterError(MageGraphError, ValueError):
    """A hyperparameter is outside its valid range."""


class NumericError(MageGraphError, ArithmeticError):
    """A computation produced NaN/Inf or received non-finite input."""

    exit_code = 3


class GradientStateError(MageGraphError, RuntimeError):
    """backward() was called on a tape that was already consumed."""
