"""Gaussian measures on R^m and their admissible-shift spaces.

A covariance is realized spectrally (eigendecomposition, not Cholesky)
because the transition covariances produced by degenerate noise maps are
rank deficient for small times and need a rank-revealing factorization.
The admissible-shift space of N(0, Q) is range(Q^{1/2}) with norm
``|Q^{-1/2} h|``; membership is decided numerically by the residual of
``h`` outside the retained eigenspace. The residual threshold
(1e-8 * |h|) is a package convention; see README.

The weight functional ``pw_weight(h, z)`` is the L2-isometric extension
of ``Q x* -> <., x*>``; it is the weight appearing in the gradient
representation of the Ornstein-Uhlenbeck semigroup.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import NotInCameronMartin, NotPSD, NotSymmetric, UnsupportedDim

DEFAULT_RANK_TOL = 1e-10
MEMBERSHIP_RTOL = 1e-8
SYMMETRY_RTOL = 1e-12

_hermgauss_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _as_matrix(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    if q.ndim == 0:
        q = q.reshape(1, 1)
    if q.ndim != 2 or q.shape[0] != q.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {q.shape}")
    if not np.all(np.isfinite(q)):
        raise ValueError("matrix has non-finite entries")
    return q


def _as_vector(h, m: int | None = None) -> np.ndarray:
    h = np.atleast_1d(np.asarray(h, dtype=float))
    if h.ndim != 1:
        raise ValueError(f"expected a vector, got shape {h.shape}")
    if m is not None and h.shape[0] != m:
        raise ValueError(f"expected length {m}, got {h.shape[0]}")
    return h


def check_symmetric(q, rtol: float = SYMMETRY_RTOL) -> np.ndarray:
    """Return ``q`` as an exactly symmetrized array, or raise NotSymmetric."""
    q = _as_matrix(q)
    scale = max(float(np.max(np.abs(q))), 1e-300)
    gap = float(np.max(np.abs(q - q.T)))
    if gap > rtol * scale:
        raise NotSymmetric(f"asymmetry {gap:.3e} exceeds {rtol:g} * {scale:.3e}")
    return 0.5 * (q + q.T)


@dataclass(frozen=True, eq=False)
class CameronMartin:
    """Spectral factorization of a PSD covariance with numerical rank.

    ``eigvecs[:, i]`` and ``eigvals[i]`` are sorted by descending eigenvalue;
    only the first ``rank`` pairs (those above ``tol * eigvals[0]``) enter
    norm and weight computations.
    """

    cov: np.ndarray
    eigvecs: np.ndarray
    eigvals: np.ndarray
    rank: int
    tol: float

    @property
    def dim(self) -> int:
        return self.cov.shape[0]

    def residual(self, h) -> float:
        """Norm of the component of ``h`` outside the retained eigenspace."""
        h = _as_vector(h, self.dim)
        coeffs = self.eigvecs[:, : self.rank].T @ h
        return float(np.linalg.norm(h - self.eigvecs[:, : self.rank] @ coeffs))

    def contains(self, h, rtol: float = MEMBERSHIP_RTOL) -> bool:
        h = _as_vector(h, self.dim)
        hn = float(np.linalg.norm(h))
        return self.residual(h) <= rtol * hn

    def require_member(self, h, rtol: float = MEMBERSHIP_RTOL) -> np.ndarray:
        h = _as_vector(h, self.dim)
        hn = float(np.linalg.norm(h))
        res = self.residual(h)
        if res > rtol * hn:
            raise NotInCameronMartin(
                f"residual {res:.3e} outside retained eigenspace exceeds "
                f"{rtol:g} * |h| = {rtol * hn:.3e}")
        return h

    def sqrt_matrix(self) -> np.ndarray:
        """U diag(sqrt(s)) on the retained eigenspace (m x rank)."""
        return self.eigvecs[:, : self.rank] * np.sqrt(self.eigvals[: self.rank])


def psd_factor(q, tol: float = DEFAULT_RANK_TOL) -> CameronMartin:
    """Factor a symmetric PSD matrix, rejecting meaningfully negative spectra.

    Eigenvalues below ``-tol * max(eigval)`` raise NotPSD; eigenvalues in
    the band ``(-tol*max, tol*max]`` are clipped to zero and excluded from
    the numerical rank.
    """
    q = check_symmetric(q)
    vals, vecs = np.linalg.eigh(q)
    order = np.argsort(vals)[::-1]
    vals = vals[order]
    vecs = vecs[:, order]
    top = max(float(vals[0]), 0.0)
    floor = -tol * max(top, 1e-300)
    if float(vals[-1]) < floor:
        raise NotPSD(f"eigenvalue {vals[-1]:.3e} below {floor:.3e}")
    vals = np.clip(vals, 0.0, None)
    rank = int(np.sum(vals > tol * top)) if top > 0.0 else 0
    return CameronMartin(cov=q, eigvecs=vecs, eigvals=vals, rank=rank, tol=tol)


def cm_norm(cm: CameronMartin, h) -> float:
    """``|Q^{-1/2} h|`` computed in the retained spectral basis."""
    h = cm.require_member(h)
    if cm.rank == 0:
        return 0.0
    coeffs = cm.eigvecs[:, : cm.rank].T @ h
    return float(np.sqrt(np.sum(coeffs**2 / cm.eigvals[: cm.rank])))


def pw_weight(cm: CameronMartin, h, z) -> np.ndarray | float:
    """Isometric weight ``sum_i (u_i . h)(u_i . z) / s_i`` over retained pairs.

    ``z`` may be a single vector (returns float) or an array of row vectors
    (returns a 1-D array). Linear in both arguments.
    """
    h = cm.require_member(h)
    z = np.asarray(z, dtype=float)
    single = z.ndim == 1
    zs = np.atleast_2d(z)
    if zs.shape[1] != cm.dim:
        raise ValueError(f"z rows must have length {cm.dim}")
    if cm.rank == 0:
        out = np.zeros(zs.shape[0])
    else:
        u = cm.eigvecs[:, : cm.rank]
        a = (u.T @ h) / cm.eigvals[: cm.rank]
        out = zs @ u @ a
    return float(out[0]) if single else out


# Backwards-friendly alias matching the mathematical name.
paley_wiener = pw_weight


@dataclass(frozen=True, eq=False)
class GaussianMeasure:
    """Mean + covariance pair with a cached rank-revealing factor."""

    mean: np.ndarray
    cov: np.ndarray
    factor: CameronMartin = field(init=False, repr=False)

    def __init__(self, mean, cov, tol: float = DEFAULT_RANK_TOL):
        mean = _as_vector(mean)
        cm = psd_factor(cov, tol=tol)
        if cm.dim != mean.shape[0]:
            raise ValueError("mean and covariance dimensions differ")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cm.cov)
        object.__setattr__(self, "factor", cm)

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


def gauss_sample(gm: GaussianMeasure, rng: np.random.Generator, n: int) -> np.ndarray:
    """Draw ``n`` samples, shape (n, m); zero-variance directions stay at the mean."""
    root = gm.factor.sqrt_matrix()
    xi = rng.standard_normal((n, root.shape[1]))
    return gm.mean[None, :] + xi @ root.T


class Hermite(NamedTuple):
    """Tensor Gauss-Hermite rule in the principal axes (m <= 3 only)."""

    order: int = 20


class MonteCarlo(NamedTuple):
    """Plain Monte Carlo with a dedicated substream seed."""

    n: int = 100_000
    seed: int = 0


class Estimate(NamedTuple):
    """Value with a standard error (0 for deterministic quadrature)."""

    value: float
    stderr: float


def _hermgauss(order: int) -> tuple[np.ndarray, np.ndarray]:
    if order not in _hermgauss_cache:
        x, w = np.polynomial.hermite.hermgauss(order)
        # nodes/weights for E[g(xi)], xi standard normal
        _hermgauss_cache[order] = (x * np.sqrt(2.0), w / np.sqrt(np.pi))
    return _hermgauss_cache[order]


def hermite_points(gm: GaussianMeasure, order: int) -> tuple[np.ndarray, np.ndarray]:
    """Quadrature points (k, m) and weights (k,) for E over the measure.

    Axes with retained variance get a tensor Gauss-Hermite factor; the
    discarded (zero-variance) axes contribute the mean only.
    """
    if gm.dim > 3:
        raise UnsupportedDim(f"tensor Hermite limited to m <= 3, got m = {gm.dim}")
    x1, w1 = _hermgauss(order)
    cm = gm.factor
    axes_x, axes_w = [], []
    for i in range(cm.rank):
        axes_x.append(x1 * np.sqrt(cm.eigvals[i]))
        axes_w.append(w1)
    if cm.rank == 0:
        return gm.mean[None, :], np.ones(1)
    grids = np.meshgrid(*axes_x, indexing="ij")
    wgrids = np.meshgrid(*axes_w, indexing="ij")
    coords = np.stack([g.ravel() for g in grids], axis=1)  # (k, rank)
    weights = np.prod(np.stack([g.ravel() for g in wgrids], axis=1), axis=1)
    pts = gm.mean[None, :] + coords @ cm.eigvecs[:, : cm.rank].T
    return pts, weights


def _eval_field(f: Callable, pts: np.ndarray) -> np.ndarray:
    """Evaluate a scalar field on points (k, m); m=1 fields see a flat array."""
    arg = pts[:, 0] if pts.shape[1] == 1 else pts
    out = np.asarray(f(arg), dtype=float)
    if out.shape != (pts.shape[0],):
        raise ValueError("scalar field must map (k, m) points to (k,) values")
    return out


def gauss_expect(gm: GaussianMeasure, f: Callable, method: Hermite | MonteCarlo) -> Estimate:
    """Approximate the expectation of ``f`` under the measure.

    ``f`` must be vectorized: it receives points with shape (k,) for m = 1
    and (k, m) otherwise, and returns (k,) values.
    """
    if isinstance(method, Hermite):
        pts, w = hermite_points(gm, method.order)
        return Estimate(float(np.dot(w, _eval_field(f, pts))), 0.0)
    if isinstance(method, MonteCarlo):
        from .rng import substream

        vals = _eval_field(f, gauss_sample(gm, substream(method.seed), method.n))
        mean = float(np.mean(vals))
        stderr = float(np.std(vals, ddof=1) / np.sqrt(method.n)) if method.n > 1 else 0.0
        return Estimate(mean, stderr)
    raise TypeError(f"unknown method {method!r}")
