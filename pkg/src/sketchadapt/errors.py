"""Exception types shared across the package."""


class SketchAdaptError(Exception):
    """Base class for all package errors."""


class InvalidSketch(SketchAdaptError):
    """Raised for degenerate or malformed stroke input."""


class ShapeError(SketchAdaptError):
    """Raised when an array or feature has the wrong dimensions."""


class ParseError(SketchAdaptError):
    """Raised on malformed dataset records.

    Carries the 1-based line number of the offending record when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ConfigError(SketchAdaptError):
    """Raised for invalid configuration values."""


class SamplingError(SketchAdaptError):
    """Raised when an episode cannot be drawn from the available data."""


class NumericalError(SketchAdaptError):
    """Raised when a loss or gradient turns non-finite."""


class CheckpointError(SketchAdaptError):
    """Raised for incompatible or corrupt checkpoints."""
