"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class SMCGError(Exception):
    exit_code = 1


class ConfigError(SMCGError, ValueError):
    exit_code = 2


class ShapeError(SMCGError, ValueError):
    exit_code = 2


class DataError(SMCGError, ValueError):
    exit_code = 2


class StorageError(SMCGError, OSError):
    """Reading or writing files failed."""

    exit_code = 3


class CheckpointError(SMCGError):
    exit_code = 4


class NumericError(SMCGError, ArithmeticError):
    exit_code = 5
