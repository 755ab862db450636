"""Exception types shared across the package."""


class QSparseError(Exception):
    """Base class for package errors."""


class DomainError(QSparseError, ValueError):
    """Input outside the domain of an operation."""


class ConfigError(QSparseError, ValueError):
    """Invalid or inconsistent configuration."""


class FormatError(QSparseError, ValueError):
    """Malformed serialized data.

    ``offset`` is the byte position at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset
