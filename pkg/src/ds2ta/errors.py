"""Exception types shared across the package.

Every error raised on a contract violation is a subclass of ValueError (or
ArithmeticError for numeric failures) so callers can still catch broadly,
but tests and the CLI can distinguish the failure families.
"""

from __future__ import annotations


class DimensionError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class AxisError(ValueError):
    """A reduction or transpose axis is out of range or repeated."""


class LabelError(ValueError):
    """A class label lies outside [0, n_classes)."""


class NumericError(ArithmeticError):
    """A non-finite value appeared where a finite one is required."""


class ConfigError(ValueError):
    """A configuration value violates its documented constraints."""


class ScoreRangeError(ValueError):
    """An attention score fell outside [0, head_dim]."""


class PrecisionError(ValueError):
    """A fixed-point operation would discard significant bits."""


class FormatError(ValueError):
    """A serialized artifact is malformed. Carries the byte offset."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class GenerationError(ValueError):
    """Synthetic data generator parameters are unsatisfiable."""


class InputError(ValueError):
    """An input collection is empty or otherwise unusable."""
