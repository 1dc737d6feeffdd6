"""Exception hierarchy shared by every module of the package."""


class MMMError(Exception):
    """Base class for all errors raised by :mod:`mmm`."""


class ShapeError(MMMError, ValueError):
    """Array dimensions disagree."""


class CovarianceError(MMMError, ValueError):
    """A covariance matrix is not symmetric positive definite."""


class ConditioningError(MMMError, ValueError):
    """The observed block of a covariance matrix is singular."""


class ConstraintError(MMMError, ValueError):
    """The determinant constraint cannot be applied."""


class ValidationError(MMMError, ValueError):
    """Input data or configuration violates its declared schema."""


class RegionError(MMMError, ValueError):
    """A truncation region is empty or degenerate."""


class NumericalError(MMMError, ArithmeticError):
    """A computation produced no finite result."""

    def __init__(self, message, unit=None):
        super().__init__(message)
        self.unit = unit


class DegenerateClusterError(MMMError):
    """A mixture component lost (almost) all of its responsibility mass."""

    def __init__(self, cluster, mass):
        super().__init__(f"cluster {cluster} is degenerate (responsibility mass {mass:.3g})")
        self.cluster = cluster
        self.mass = mass


class FitFailedError(MMMError):
    """The EM driver exhausted its restart budget."""


class SelectionError(MMMError):
    """No candidate number of clusters produced a usable fit."""
