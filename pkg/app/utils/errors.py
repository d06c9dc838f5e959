"""Exception hierarchy shared by the library and the CLI.

Every error carries the process exit code the CLI reports for it.
"""

from typing import Optional


class CopulaImputeError(Exception):
    """Base class for all library errors."""

    exit_code: int = 1


class ConfigError(CopulaImputeError):
    """Invalid configuration, flags, schema or kernel arguments."""

    exit_code = 2


class DataError(CopulaImputeError):
    """Malformed or inconsistent input data."""

    exit_code = 3


class DegenerateColumnError(DataError):
    """A copula column has fewer than 2 distinct observed values."""

    def __init__(self, column: str, distinct: int):
        self.column = column
        self.distinct = distinct
        super().__init__(
            f"Column '{column}' has {distinct} distinct observed value(s); at least 2 are required"
        )


class NumericalError(CopulaImputeError):
    """Numerical failure inside a sampler (Cholesky, conditioning, ...)."""

    exit_code = 4

    def __init__(self, message: str, iteration: Optional[int] = None):
        self.iteration = iteration
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)


class ConditioningError(NumericalError):
    """Correlation sub-matrix too close to singular."""
