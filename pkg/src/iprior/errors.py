"""Exception types raised by the package."""


class IpriorError(Exception):
    """Base class for package errors."""


class DataError(IpriorError, ValueError):
    """Input data or model configuration is invalid."""


class NumericalError(IpriorError, ArithmeticError):
    """A computation produced non-finite or otherwise unusable values."""
