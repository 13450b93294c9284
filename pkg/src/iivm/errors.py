"""Exception types shared across the package.

The CLI maps each family onto its own exit code.
"""


class IivmError(Exception):
    """Base class for all package errors."""


class ConfigError(IivmError, ValueError):
    """Invalid parameters or configuration (exit code 1)."""


class DataError(IivmError, ValueError):
    """Unreadable, malformed or inconsistent input data (exit code 2)."""


class NumericalError(IivmError, ArithmeticError):
    """A numerical procedure failed (exit code 3)."""

    def __init__(self, message, condition=None):
        if condition is not None:
            message = f"{message} (condition estimate {condition:.3e})"
        super().__init__(message)
        self.condition = condition
