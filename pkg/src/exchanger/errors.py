"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes, so each class carries its code.
"""


class ExchangerError(Exception):
    exit_code = 1


class ConfigError(ExchangerError, ValueError):
    exit_code = 1


class DimensionError(ExchangerError, ValueError):
    """Operand shapes are incompatible."""

    exit_code = 1


class ContractError(ExchangerError, RuntimeError):
    """An API precondition was violated by the caller."""

    exit_code = 1


class DataError(ExchangerError, ValueError):
    exit_code = 2


class FormatError(DataError):
    """A file on disk does not follow the expected binary layout."""


class NumericalError(ExchangerError, ArithmeticError):
    """Training diverged; ``last_good`` holds the parameters from the last completed epoch."""

    exit_code = 3

    def __init__(self, message: str, last_good: dict | None = None):
        super().__init__(message)
        self.last_good = last_good
