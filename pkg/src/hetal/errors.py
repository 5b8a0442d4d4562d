"""Exception hierarchy shared by every module."""


class HetalError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(HetalError, ValueError):
    """Array shapes disagree with each other or with a model config."""


class InputError(HetalError, ValueError):
    """An argument is out of range, non-finite or otherwise invalid."""


class NumericError(HetalError, ArithmeticError):
    """A computation produced non-finite values."""


class ConfigurationError(HetalError, ValueError):
    """A configuration is inconsistent with the requested operation."""


class PreconditionError(HetalError, RuntimeError):
    """An operation was called on a state it cannot handle (e.g. an empty pool)."""
