"""Exception hierarchy shared across the package."""


class DiffkitError(Exception):
    """Base class for all package errors."""


class ConfigError(DiffkitError, ValueError):
    """Invalid configuration or hyperparameter combination."""


class ShapeError(DiffkitError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(DiffkitError, RuntimeError):
    """A call violated an operation's precondition."""


class NumericError(DiffkitError, ArithmeticError):
    """Non-finite values or an ill-conditioned computation."""


class DataFormatError(DiffkitError, ValueError):
    """Malformed input file or buffer."""


class InputError(DiffkitError, ValueError):
    """Invalid argument values (labels, probability rows, sample counts)."""
