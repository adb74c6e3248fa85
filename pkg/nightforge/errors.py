"""Exception types shared across the nightforge package."""
from __future__ import annotations

from typing import Optional


class NightforgeError(RuntimeError):
    """Base class for every error raised by nightforge."""


class DecodeError(NightforgeError):
    """Raised when a PNG stream is malformed."""

    def __init__(self, message: str, *, offset: int) -> None:
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class UnsupportedFormatError(NightforgeError):
    """Raised for PNG variants outside 8-bit grayscale/RGB."""


class RangeError(NightforgeError):
    """Raised when an image outside the linear [0, 1] range is encoded."""


class ShapeError(NightforgeError, ValueError):
    """Raised when image dimensions or channel counts do not fit an operation."""


class ParameterError(NightforgeError, ValueError):
    """Raised when a numeric parameter is outside its admissible range."""


class NumericalError(NightforgeError):
    """Raised when an optimisation produces non-finite values."""

    def __init__(self, message: str, *, term: str) -> None:
        super().__init__(f"{message} [{term}]")
        self.term = term


class UsageError(NightforgeError, ValueError):
    """Raised when an operation is called with inputs violating its contract."""


class IngestionError(NightforgeError):
    """Raised when annotation or prediction files cannot be read."""

    def __init__(self, message: str, *, path: str, line: Optional[int] = None) -> None:
        location = path if line is None else f"{path}:{line}"
        super().__init__(f"{message}: {location}")
        self.path = path
        self.line = line


class ConfigError(NightforgeError):
    """Raised when a pipeline configuration cannot be resolved."""


__all__ = [
    "NightforgeError",
    "DecodeError",
    "UnsupportedFormatError",
    "RangeError",
    "ShapeError",
    "ParameterError",
    "NumericalError",
    "UsageError",
    "IngestionError",
    "ConfigError",
]
