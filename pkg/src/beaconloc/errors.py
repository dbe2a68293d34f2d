"""Exception hierarchy shared by every module.

Each class carries the CLI exit code it maps to.
"""


class LocalizationError(Exception):
    exit_code = 1


class ConfigError(LocalizationError):
    exit_code = 2

    def __init__(self, message, key=None, line=None):
        super().__init__(message)
        self.key = key
        self.line = line


class SpecError(ConfigError):
    """Invalid model specification."""


class DataError(LocalizationError):
    exit_code = 3


class MapFormatError(DataError):
    def __init__(self, message, line=None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


class ValidationError(DataError):
    pass


class NumericError(LocalizationError):
    exit_code = 4


class SimulationError(NumericError):
    pass


class ShapeError(NumericError, ValueError):
    pass
