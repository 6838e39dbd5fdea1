"""Exception hierarchy shared by every module.

The CLI maps these onto process exit codes: ConfigError -> 1,
DataError / FormatError / DimensionError -> 2, NumericError -> 3.
"""


class LesionSegError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(LesionSegError):
    """Shapes or volume dimensions do not satisfy an operation's contract."""


class ConfigError(LesionSegError):
    """Invalid configuration value or unsupported operation variant."""


class DataError(LesionSegError):
    """Missing or semantically invalid input data."""


class FormatError(LesionSegError):
    """Malformed binary or text artifact on disk."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(LesionSegError):
    """A non-finite value appeared where the computation requires finite ones."""
