"""Exception hierarchy shared by every module."""


class SubByteError(Exception):
    """Base class for all package errors."""

    exit_code = 3


class ConfigurationError(SubByteError, ValueError):
    exit_code = 1


class DimensionError(SubByteError, ValueError):
    exit_code = 2


class DataError(SubByteError, ValueError):
    exit_code = 2


class FormatError(DataError):
    pass


class RangeError(SubByteError, ValueError):
    exit_code = 2


class DomainError(SubByteError, ValueError):
    exit_code = 2


class NumericError(SubByteError, ArithmeticError):
    exit_code = 3


class CompilationError(NumericError):
    pass


class SelectionError(SubByteError):
    exit_code = 3


class StateError(SubByteError, RuntimeError):
    exit_code = 3
