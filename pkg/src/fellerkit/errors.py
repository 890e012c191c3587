"""Exception hierarchy shared across the package.

Every numerical failure mode raises a dedicated subclass of
:class:`FellerKitError` so callers can distinguish "the input is bad"
(symmetry, bounds) from "the hypothesis fails here" (strong Feller range
tests, contraction) from "the numerics gave up" (quadrature, iteration).
"""

from __future__ import annotations


class FellerKitError(Exception):
    """Base class for all package errors."""


class NotSymmetric(FellerKitError):
    """Matrix asymmetry exceeds the allowed tolerance."""


class NotPSD(FellerKitError):
    """An eigenvalue is more negative than the PSD tolerance allows."""


class NotInCameronMartin(FellerKitError):
    """Vector has a component outside the retained eigenspace of Q^{1/2}."""


class UnsupportedDim(FellerKitError):
    """Tensor quadrature requested in too many dimensions."""


class Overflow(FellerKitError):
    """Matrix exponential argument too large to evaluate safely."""


class QuadratureDiverged(FellerKitError):
    """Two quadrature refinement levels disagree beyond tolerance."""


class NotStrongFeller(FellerKitError):
    """A required direction fell outside the covariance range.

    Carries the offending direction in ``direction`` when available.
    """

    def __init__(self, message: str, direction=None):
        super().__init__(message)
        self.direction = direction


class NotControllable(FellerKitError):
    """Controllability matrix is rank deficient at the final block."""


class BadBounds(FellerKitError):
    """Grid bounds or cell counts violate the construction contract."""


class GridMismatch(FellerKitError):
    """Operation mixes objects living on different grids."""


class DegenerateCovariance(FellerKitError):
    """Transition covariance too narrow to resolve on the grid."""


class ExcessLeak(FellerKitError):
    """Kernel mass escaping the grid box exceeds the configured tolerance."""


class NoContraction(FellerKitError):
    """No horizon small enough to make the Volterra operator a contraction."""


class NotConverged(FellerKitError):
    """Fixed-point iteration exhausted its iteration budget.

    Carries the iteration count in ``iterations``.
    """

    def __init__(self, message: str, iterations: int | None = None):
        super().__init__(message)
        self.iterations = iterations


class Unstable(FellerKitError):
    """Drift matrix has an eigenvalue with nonnegative real part."""


class AliasRisk(UserWarning):
    """Physical grid too coarse to dealias the drift nonlinearity."""
