class SemuError(Exception):
    """Base class for errors raised by this package."""


class InvalidInputError(SemuError, ValueError):
    """An argument violates an operation's precondition."""


class ConfigError(SemuError, ValueError):
    """A configuration is inconsistent or incomplete."""


class NumericalError(SemuError, ArithmeticError):
    """An iterative routine failed to converge or produced non-finite values."""
