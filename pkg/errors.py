"""Exception hierarchy shared by the filter library, the solvers and the CLI."""

from typing import Optional


class StructFiltError(Exception):
    """Base class for every error raised by this package.

    ``step`` is filled in by the time loop so a failure inside a filter call
    can be traced back to the timestep that produced it.
    """

    def __init__(self, message: str = "", step: Optional[int] = None):
        super().__init__(message)
        self.step = step

    def __str__(self) -> str:
        message = super().__str__()
        if self.step is not None:
            return f"{message} (at step {self.step})"
        return message


class DegenerateSeries(StructFiltError):
    """A polynomial is numerically zero and has no isolated roots."""


class DegenerateNormal(StructFiltError):
    """The constraint operator annihilates every basis function at a point."""


class RankDeficient(StructFiltError):
    """Equality constraint vectors are linearly dependent."""


class NotSPD(StructFiltError):
    """An assembled mass matrix is not symmetric positive definite."""


class SingularOperator(StructFiltError):
    """The implicit time-stepping operator could not be factored."""


class ConfigError(StructFiltError):
    """An experiment configuration is invalid."""


class NotConverged(StructFiltError):
    """The greedy filter hit its iteration cap.

    Carries the best iterate found and the filter report.
    """

    def __init__(self, message: str, coeffs=None, report=None, step: Optional[int] = None):
        super().__init__(message, step=step)
        self.coeffs = coeffs
        self.report = report


class Infeasible(StructFiltError):
    """The equality and inequality constraints admit no common solution."""

    def __init__(self, message: str, report=None, step: Optional[int] = None):
        super().__init__(message, step=step)
        self.report = report
