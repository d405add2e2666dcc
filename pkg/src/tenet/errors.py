"""Exception types shared across the package.

Every error raised by library code derives from :class:`TenetError` so
callers (and the CLI) can catch one base class and still tell failure
modes apart.
"""

from __future__ import annotations


class TenetError(Exception):
    """Base class for all package errors."""


class ValidationError(TenetError):
    """An input value violates a documented precondition."""


class DegenerateBoxError(ValidationError):
    """A box collapsed to zero area (for example after clamping)."""


class AlignmentError(ValidationError):
    """Two sequences do not cover the same video frames."""


class OrderingError(ValidationError):
    """Frame indices are not strictly increasing."""


class DimensionError(ValidationError):
    """Feature vectors with inconsistent dimensionality."""


class ShapeError(ValidationError):
    """Array operands with mismatched shapes."""


class LengthError(ValidationError):
    """Run-length counts do not sum to the expected number of pixels."""


class CoverageError(ValidationError):
    """A required (video, frame) key is missing from an input collection."""


class ParseError(TenetError):
    """A record file line could not be decoded.

    Carries the 1-based line number when known.
    """

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigurationError(TenetError):
    """Inconsistent or unusable configuration."""


class NumericError(TenetError):
    """A numerical operation produced non-finite or singular results."""


class DivergenceError(NumericError):
    """Training loss became non-finite."""


class EmptyBatchError(ValidationError):
    """A training step received no samples."""


class EmptyVideoError(ValidationError):
    """A video with no frames."""


class EmptySelectionError(ValidationError):
    """A selection op received no candidates to choose from."""


class MissingAnchorError(ValidationError):
    """The first frame carries no detection to anchor carry-forward."""


class ServiceError(TenetError):
    """The segmentation service returned a non-success status."""

    def __init__(self, message: str, status: int | None = None):
        super().__init__(message)
        self.status = status


class RetryableError(ServiceError):
    """A transient transport failure (timeout, connection reset)."""


class ProtocolError(ServiceError):
    """The segmentation service response could not be interpreted."""


class UsageError(TenetError):
    """Bad command-line usage."""
