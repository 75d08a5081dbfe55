"""
Structured errors raised by the reconstruction toolkit.

Every error carries the process exit code the command line maps it to.
"""
from typing import List, Optional


class PSNetError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 4

    def __init__(self, message: str, **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def __str__(self) -> str:
        if not self.details:
            return self.message
        extra = ", ".join(f"{key}={value}" for key, value in self.details.items())
        return f"{self.message} ({extra})"


class InputValidationError(PSNetError, ValueError):
    """Inconsistent dimensions, invalid parameter values or infeasible budgets."""

    exit_code = 3


class FileFormatError(InputValidationError):
    """A PSNT/PSNP file has the wrong magic, version, tags or a truncated payload."""


class NumericalError(PSNetError, ArithmeticError):
    """Zero denominators or non-finite intermediates."""

    exit_code = 4

    def __init__(self, message: str, sweep: Optional[int] = None, **details):
        if sweep is not None:
            details["sweep"] = sweep
        super().__init__(message, **details)
        self.sweep = sweep


class ConvergenceError(NumericalError):
    """An iterative linear solve stopped before reaching its tolerance."""

    def __init__(self, message: str, residual: float, **details):
        super().__init__(message, residual=residual, **details)
        self.residual = residual


class DivergenceError(NumericalError):
    """Training loss exceeded the divergence threshold; the history so far is kept."""

    def __init__(self, message: str, history: List[float], **details):
        super().__init__(message, step=len(history), **details)
        self.history = list(history)


def check_same_shape(name_a: str, a_shape, name_b: str, b_shape) -> None:
    """Raise InputValidationError unless the two shapes agree."""
    if tuple(a_shape) != tuple(b_shape):
        raise InputValidationError(
            f"dimension mismatch between {name_a} and {name_b}",
            **{name_a: tuple(a_shape), name_b: tuple(b_shape)},
        )
