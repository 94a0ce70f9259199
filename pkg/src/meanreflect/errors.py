"""Exception hierarchy shared by all modules.

The CLI maps these onto exit statuses, so every failure raised inside the
package should be one of them.
"""


class MeanReflectError(Exception):
    """Base class for package errors."""


class DomainError(MeanReflectError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class DataError(MeanReflectError, ValueError):
    """Input data is malformed (NaN entries, wrong dtype)."""


class ContractError(MeanReflectError, ValueError):
    """Shapes or companion arguments do not satisfy an operation's contract."""


class ConfigurationError(MeanReflectError):
    """An experiment configuration is invalid (bad key, CFL violation, ...)."""


class BlowUpError(MeanReflectError, ArithmeticError):
    """The numerical state became non-finite."""

    def __init__(self, message: str, step: int | None = None, pair: int | None = None):
        super().__init__(message)
        self.step = step
        self.pair = pair


class NumericalContractError(MeanReflectError, ArithmeticError):
    """A numerical routine could not meet its guarantee (e.g. a root bracket)."""


class CheckFailure(MeanReflectError, AssertionError):
    """A run-time verification check did not hold within tolerance."""
