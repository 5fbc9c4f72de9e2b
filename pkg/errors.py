"""Exception hierarchy for spatialrisk.

Every error carries the process exit code the CLI should return, so library
callers can raise precise exceptions and the command line maps them without a
lookup table.
"""
from __future__ import annotations

from typing import Optional


class SpatialRiskError(Exception):
    exit_code: int = 1


# --- Usage (exit 2) --- #


class UsageError(SpatialRiskError):
    exit_code = 2


class ModelMismatchError(UsageError):
    """A post-fit command was asked for a model other than the one that was fit."""


# --- Validation (exit 3) --- #


class DataValidationError(SpatialRiskError):
    exit_code = 3

    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ParseError(DataValidationError):
    pass


class ConfigError(SpatialRiskError):
    exit_code = 3


# --- Numerical failures (exit 4) --- #


class NumericalError(SpatialRiskError):
    exit_code = 4


class DomainError(NumericalError, ValueError):
    pass


class NonPositiveDefiniteError(NumericalError):
    def __init__(self, min_eigenvalue: float, what: str = "correlation matrix"):
        self.min_eigenvalue = float(min_eigenvalue)
        super().__init__(
            f"{what} is not positive definite (smallest eigenvalue {self.min_eigenvalue:.3e})"
        )


class InitializationError(NumericalError):
    def __init__(self, term: str, attempts: int):
        self.term = term
        self.attempts = attempts
        super().__init__(
            f"no finite initial log density after {attempts} attempts; first non-finite term: {term}"
        )


class BoundingBoxError(NumericalError):
    pass


class McemError(NumericalError):
    pass
