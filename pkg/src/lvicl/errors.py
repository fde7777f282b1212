"""Exception hierarchy shared across the package.

The harness maps these onto process exit codes: ``ConfigError`` -> 1,
``DataError`` -> 2, ``NumericalError`` -> 3.
"""


class LviclError(Exception):
    """Base class for all package errors."""


class ConfigError(LviclError):
    pass


class DataError(LviclError):
    pass


class ParseError(DataError):
    def __init__(self, message: str, row: int | None = None, column: int | None = None):
        super().__init__(message)
        self.row = row
        self.column = column


class InsufficientDataError(DataError):
    pass


class NumericalError(LviclError):
    pass


class DimensionError(NumericalError, ValueError):
    pass


class ContractError(NumericalError, ValueError):
    pass


class VocabularyError(ContractError):
    pass


class CapacityError(ContractError):
    pass


class UndefinedMetricError(NumericalError, ValueError):
    pass


class TrainingError(NumericalError):
    def __init__(self, message: str, step: int | None = None):
        super().__init__(message)
        self.step = step


class CacheMismatchError(DataError):
    pass
