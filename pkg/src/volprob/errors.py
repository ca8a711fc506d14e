"""Exception types shared across the package.

The command line maps these onto distinct exit codes, so keep the
hierarchy flat and the meanings disjoint.
"""


class VolprobError(Exception):
    """Base class for all package-specific failures."""


class UsageError(VolprobError):
    """Caller passed arguments that violate a documented precondition."""


class ShapeError(UsageError):
    """Array extents are incompatible with the requested operation."""


class DataFormatError(VolprobError):
    """A file or byte stream does not conform to its on-disk layout."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericError(VolprobError):
    """A computation produced NaN or infinity where a finite value is required."""
