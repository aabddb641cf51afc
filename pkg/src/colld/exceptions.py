"""Exception types shared across the package."""


class ColldError(Exception):
    """Base class for all package errors."""


class ConfigurationError(ColldError, ValueError):
    """Invalid configuration: bad shapes, bad hyperparameters, bad schema."""

    def __init__(self, message, key=None):
        self.key = key
        self.message = message
        if key is not None:
            message = f"{message} (at {key})"
        super().__init__(message)


class UsageError(ColldError, ValueError):
    """An operation was called outside its preconditions."""


class NumericError(ColldError, ArithmeticError):
    """A computation produced a non-finite value."""


class FormatError(ColldError, ValueError):
    """A binary file does not match its declared layout."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
