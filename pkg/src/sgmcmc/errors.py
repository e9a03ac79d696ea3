"""Exception types shared across the package."""

from __future__ import annotations


class SGMCMCError(Exception):
    """Base class for all package errors."""


class DivergenceError(SGMCMCError):
    """A state or gradient became non-finite or tripped the magnitude guard."""

    def __init__(self, message: str, *, iteration: int | None = None, datum: int | None = None):
        self.iteration = iteration
        self.datum = datum
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)


class CorrectionInfeasibleError(SGMCMCError):
    """The variance-corrected noise covariance is not positive semi-definite."""

    def __init__(self, message: str, *, min_eigenvalue: float | None = None):
        self.min_eigenvalue = min_eigenvalue
        super().__init__(message)


class OptimizationError(SGMCMCError):
    """The SGD phase used to locate a control-variate anchor failed."""


class ParseError(SGMCMCError, ValueError):
    """Malformed input file. ``row`` is 1-based over data rows, ``column`` is a header name."""

    def __init__(self, message: str, *, row: int | None = None, column: str | None = None):
        self.row = row
        self.column = column
        where = []
        if row is not None:
            where.append(f"row {row}")
        if column is not None:
            where.append(f"column {column!r}")
        if where:
            message = f"{message} at {', '.join(where)}"
        super().__init__(message)


class NoStationaryDistributionError(SGMCMCError, ValueError):
    """The requested step size lies outside the region with a stationary law."""
