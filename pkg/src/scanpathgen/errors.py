"""Exception hierarchy. Everything raised on purpose derives from ToolkitError."""

from __future__ import annotations


class ToolkitError(Exception):
    """Base class for all errors this package raises deliberately."""


class ParseError(ToolkitError):
    """Malformed input record (carries the offending row/line when known)."""


class ValidationError(ToolkitError):
    """Well-formed input that violates a documented invariant."""


class FormatError(ToolkitError):
    """Binary container with a bad magic, version or structure."""


class ShapeError(ToolkitError):
    """Array dimensions disagree with the declared contract."""


class MissingKeyError(ToolkitError, KeyError):
    """Lookup of an id that the archive/map does not contain."""

    def __str__(self) -> str:  # KeyError quotes its args; keep the message readable
        return Exception.__str__(self)


class ConfigError(ToolkitError):
    """Invalid training/runtime configuration."""


class DegenerateScanpathError(ToolkitError):
    """Metric undefined for this input (e.g. one path has no saccade)."""


class TrainingDivergedError(ToolkitError):
    """Non-finite loss during training; diagnostics attached."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}
