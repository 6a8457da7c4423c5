"""Exception hierarchy."""

from typing import Optional


class OutlierFlowError(Exception):
    """Base class for all errors raised by outlierflow."""


class ConfigurationError(OutlierFlowError, ValueError):
    """Invalid option, size or range."""


class FormatError(OutlierFlowError):
    """A file on disk does not follow the expected binary or text format."""


class ManifestError(OutlierFlowError):
    """A dataset manifest references missing files or has malformed entries."""

    def __init__(self, message: str, entry: Optional[int] = None):
        if entry is not None:
            message = f"entry {entry}: {message}"
        super().__init__(message)
        self.entry = entry


class DomainError(OutlierFlowError, ValueError):
    """Input outside the mathematical domain of an operation."""


class NumericError(OutlierFlowError, ArithmeticError):
    """A tensor became non-finite.

    ``where`` names the layer index or loss component that produced it.
    """

    def __init__(self, message: str, where: Optional[str] = None):
        if where is not None:
            message = f"{message} (at {where})"
        super().__init__(message)
        self.where = where


class CheckpointError(OutlierFlowError):
    """Checkpoint version or kind does not match the loader."""
