"""Exception types shared across the package."""

from __future__ import annotations


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class FormatError(ValueError):
    """Input text or bytes do not follow the expected format.

    ``line`` (1-based) or ``position`` (0-based) locate the problem when known.
    """

    def __init__(self, message: str, *, line: int | None = None, position: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        elif position is not None:
            message = f"position {position}: {message}"
        super().__init__(message)
        self.line = line
        self.position = position


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given inputs (too short or constant)."""


class CheckpointError(ValueError):
    """A checkpoint file is truncated, corrupt or of an unsupported version."""


class SpecMismatchError(ValueError):
    def __init__(self, field: str, expected, got):
        super().__init__(f"model spec mismatch on {field!r}: checkpoint has {expected!r}, requested {got!r}")
        self.field = field


class NonFiniteError(FloatingPointError):
    """NaN or Inf where finite values are required."""

    def __init__(self, message: str, name: str | None = None):
        super().__init__(message)
        self.name = name


class TrainingDiverged(RuntimeError):
    """Loss became non-finite. ``checkpoint`` holds the last good state."""

    def __init__(self, message: str, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
