"""Exception types raised across the package."""


class NcssduError(Exception):
    """Base class for the package's own errors."""


class SolverFailure(RuntimeError, NcssduError):
    """An iterative solver produced non-finite values."""


class UndefinedLossError(ValueError, NcssduError):
    """The self-supervision target is identically zero."""


class TapeMismatchError(RuntimeError, NcssduError):
    """Replaying a recorded forward pass did not reproduce its outputs."""


class RankDeficientError(ValueError, NcssduError):
    """A design matrix lost column rank; ``column`` names the culprit."""

    def __init__(self, column, message=None):
        self.column = column
        super().__init__(message or f"design matrix is rank deficient at column {column!r}")


class CorruptStoreError(IOError, NcssduError):
    """A datastore blob does not match its manifest entry."""


class UnsupportedVersionError(IOError, NcssduError):
    """A datastore manifest declares an unknown format version."""


class MissingArrayError(KeyError, NcssduError):
    """A datastore lacks an array required by a command."""
