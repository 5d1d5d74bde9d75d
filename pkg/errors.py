"""
Error types for the FMGP toolkit
Every error carries the process exit code the CLI reports for it
"""

from typing import Optional


class FMGPError(Exception):
    """Base error for the toolkit"""

    exit_code: int = 1

    def __init__(self, message: str, *, detail: Optional[dict] = None):
        super().__init__(message)
        self.message = message
        self.detail = detail or {}

    def __str__(self) -> str:
        if self.detail:
            extras = ", ".join(f"{k}={v}" for k, v in self.detail.items())
            return f"{self.message} ({extras})"
        return self.message


# Configuration and input errors (exit 2)

class ConfigError(FMGPError):
    exit_code = 2


class InputError(FMGPError):
    exit_code = 2


class EmptyInput(InputError):
    pass


class DimensionMismatch(InputError):
    pass


class ClassOutOfRange(InputError):
    pass


class ModeMismatch(InputError):
    pass


class FormatError(InputError):
    pass


class ShapeError(InputError):
    pass


class DomainError(InputError):
    pass


# Numerical failures (exit 3)

class NumericalError(FMGPError):
    exit_code = 3


class NotPositiveDefinite(NumericalError):
    pass


class NonFiniteGradient(NumericalError):
    """Raised when a gradient component is NaN or Inf"""

    def __init__(self, message: str, *, step: Optional[int] = None, detail: Optional[dict] = None):
        detail = dict(detail or {})
        if step is not None:
            detail["step"] = step
        super().__init__(message, detail=detail)
        self.step = step


# Verification failures (exit 4)

class VerificationError(FMGPError):
    exit_code = 4


__all__ = [
    'FMGPError', 'ConfigError', 'InputError', 'EmptyInput', 'DimensionMismatch',
    'ClassOutOfRange', 'ModeMismatch', 'FormatError', 'ShapeError', 'DomainError',
    'NumericalError', 'NotPositiveDefinite', 'NonFiniteGradient', 'VerificationError'
]
