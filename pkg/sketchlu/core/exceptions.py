from __future__ import annotations

from typing import Any, Optional

from pydantic import BaseModel, ValidationError

# -------------------------------
# Base
# -------------------------------


class SketchLuError(Exception):
    """Root of every error raised deliberately by sketchlu."""


# -------------------------------
# Input / validation (exit code 2)
# -------------------------------


class InputError(SketchLuError, ValueError):
    """Raised when inputs, configs or files fail validation."""


class ConfigError(InputError):
    """Raised when a run config is missing a required value or is inconsistent."""


class InvalidDimensions(InputError):
    """Raised when requested dimensions cannot be realized (e.g. s > p_pad)."""


class DimensionMismatch(InputError):
    """Raised when an operand's shape does not match the operator it is applied to."""


class InvalidAlpha(InputError):
    """Raised when a prior precision is not strictly positive."""


class InvalidPipeline(InputError):
    """Raised when a score method is combined with the wrong basis fields."""


class InvalidBasis(InputError):
    """Raised when a basis is not column-orthonormal or its parts disagree in size."""


class EmptyInput(InputError):
    """Raised when a statistic is requested over an empty sample."""


class FormatError(InputError):
    """Raised when a binary file (IDX, MLPC, SKLB) cannot be decoded."""


class BadMagic(FormatError):
    """Raised when a file does not start with the expected magic number."""


class TruncatedFile(FormatError):
    """Raised when a payload is shorter than its header promises."""


class MissingField(FormatError):
    """Raised when a persisted basis lacks a block the caller needs."""

    def __init__(self, field: str, message: Optional[str] = None) -> None:
        self.field = field
        super().__init__(message or f"basis file has no '{field}' block")


# -------------------------------
# Training (exit code 3)
# -------------------------------


class NonFiniteLoss(SketchLuError, ArithmeticError):
    """Raised when SGD produces a NaN/inf loss."""

    def __init__(self, epoch: int, step: int, loss: float) -> None:
        self.epoch = epoch
        self.step = step
        self.loss = loss
        super().__init__(
            f"non-finite training loss {loss!r} at epoch {epoch}, step {step}"
        )


# -------------------------------
# Numerical (exit code 4)
# -------------------------------


class NumericalError(SketchLuError, ArithmeticError):
    """Raised when a numerical kernel cannot produce a trustworthy result."""


class RankDeficient(NumericalError):
    """Raised when a column collapses during orthogonalization."""

    def __init__(self, column: int, message: Optional[str] = None) -> None:
        self.column = column
        super().__init__(message or f"column {column} is numerically dependent")


class ConvergenceFailure(NumericalError):
    """Raised when the tridiagonal eigensolver exceeds its iteration cap."""


class Breakdown(NumericalError):
    """Raised by Lanczos in strict mode when the Krylov space is exhausted."""

    def __init__(self, iteration: int) -> None:
        self.iteration = iteration
        super().__init__(f"Lanczos breakdown at iteration {iteration}")


# -------------------------------
# Validated domain models
# -------------------------------


def typed_cause(err: ValidationError) -> Optional[SketchLuError]:
    """The sketchlu error a validator raised, if pydantic wrapped one."""
    for detail in err.errors():
        cause = detail.get("ctx", {}).get("error")
        if isinstance(cause, SketchLuError):
            return cause
    return None


class CheckedModel(BaseModel):
    """
    BaseModel whose validators may raise sketchlu errors.

    pydantic wraps every ValueError raised during validation in a
    ValidationError; construction re-raises the typed error instead so
    callers and exit codes see DimensionMismatch, InvalidBasis, etc.
    """

    def __init__(self, /, **data: Any) -> None:
        try:
            super().__init__(**data)
        except ValidationError as err:
            cause = typed_cause(err)
            if cause is None:
                raise
            raise cause from None


# -------------------------------
# Exit codes
# -------------------------------

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_NUMERICAL = 4


def exit_code_for(exc: BaseException) -> Optional[int]:
    """Map an exception raised by a command to its exit code (None = unexpected)."""
    if isinstance(exc, ValidationError):
        cause = typed_cause(exc)
        return EXIT_CONFIG if cause is None else exit_code_for(cause)
    if isinstance(exc, NonFiniteLoss):
        return EXIT_TRAINING
    if isinstance(exc, NumericalError):
        return EXIT_NUMERICAL
    if isinstance(exc, (InputError, FileNotFoundError)):
        return EXIT_CONFIG
    return None
