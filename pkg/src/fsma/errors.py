"""Exception hierarchy shared across the package.

Every error raised on purpose derives from :class:`FsmaError` so the CLI can
map failure classes onto distinct exit codes (validation vs runtime vs IO).
"""


class FsmaError(Exception):
    """Base class for all package errors."""


class ValidationError(FsmaError):
    """Bad usage or contract violation: malformed manifests, shape
    mismatches, wrong shot counts, duplicate labels, and the like."""


class DecodeError(FsmaError):
    """An image file could not be read or decoded."""


class FormatError(FsmaError):
    """An image decoded but is not usable as RGB input."""


class NumericError(FsmaError):
    """A computation produced non-finite values or diverged."""


class DegeneracyError(FsmaError):
    """A zero vector reached an operation with undefined cosine geometry.

    Signals an upstream failure (e.g. a dead embedding head); deliberately a
    hard error, never silently epsilon-fixed.
    """


class StorageError(FsmaError):
    """Disk or IO failure in the feature cache or output writers."""


class CacheCorruptionError(StorageError):
    """A cache entry failed its checksum; callers treat it as absent."""
