"""Exception types shared across the package."""

from __future__ import annotations


class TokenMapError(Exception):
    """Base class for all package errors."""


class InvalidFrame(TokenMapError, ValueError):
    """A frame or patch-token set cannot be ingested."""


class InvalidInput(TokenMapError, ValueError):
    """Non-finite or malformed numeric input."""


class ConfigError(TokenMapError, ValueError):
    """Inconsistent configuration (shapes, policies, camera, ...)."""


class FormatError(TokenMapError):
    """A binary file does not match its declared layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class CorruptFile(FormatError):
    """Checksum mismatch or truncated payload."""


class VersionError(FormatError):
    """Unsupported on-disk format version."""


class InternalInvariantViolation(TokenMapError, RuntimeError):
    """An internal consistency check failed; indicates a bug."""
