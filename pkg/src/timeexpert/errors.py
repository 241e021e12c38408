"""Exception hierarchy shared by every module."""


class TimeExpertError(Exception):
    """Base class for all toolkit errors."""


class InvalidShape(TimeExpertError, ValueError):
    pass


class InvalidArgument(TimeExpertError, ValueError):
    pass


class NonFinite(TimeExpertError, FloatingPointError):
    """An operation produced NaN or Inf."""


class NonFiniteLoss(TimeExpertError, FloatingPointError):
    def __init__(self, message: str, batch_index: int | None = None):
        super().__init__(message)
        self.batch_index = batch_index


class MissingFile(TimeExpertError, FileNotFoundError):
    pass


class ParseError(TimeExpertError, ValueError):
    def __init__(self, message: str, row: int, col: int):
        super().__init__(f"{message} (row {row}, column {col})")
        self.row = row
        self.col = col


class NonNumericCell(ParseError):
    pass


class EmptySplit(TimeExpertError, ValueError):
    pass


class CorruptCheckpoint(TimeExpertError, ValueError):
    pass


class UnsupportedVersion(TimeExpertError, ValueError):
    pass


class ConfigMismatch(TimeExpertError, ValueError):
    pass


class ConfigError(TimeExpertError, ValueError):
    """Invalid or unknown configuration values."""
