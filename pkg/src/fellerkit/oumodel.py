"""The linear model: matrix semigroup, noise Gramian, transition expectations.

The pair (A, G) defines ``dX = AX dt + G dW``. Everything downstream needs
four quantities from it: the flow ``S(t) = exp(tA)``, the Gramian
``Q_t = \\int_0^t S(s) G G' S(s)' ds``, the smoothing norm
``phi(t) = |Q_t^{-1/2} S(t)|`` (largest singular value restricted to the
retained eigenspace), and the controllability index ``k`` that governs the
small-time blow-up ``|Q_t^{-1/2}| ~ t^{-k-1/2}``.

All operator norms on the state space are spectral (Euclidean) norms.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np
import scipy.linalg

from .errors import NotControllable, NotStrongFeller, Overflow, QuadratureDiverged
from .gaussian import (
    DEFAULT_RANK_TOL,
    Estimate,
    GaussianMeasure,
    Hermite,
    MonteCarlo,
    cm_norm,
    gauss_expect,
    hermite_points,
    psd_factor,
    pw_weight,
    _as_vector,
    _eval_field,
)
from .quadrature import gauss_legendre
from .rng import substream

FLOW_NORM_LIMIT = 700.0


@dataclass(frozen=True, eq=False)
class OUModel:
    """Drift matrix and noise map of the linear equation."""

    drift: np.ndarray
    noise: np.ndarray

    def __init__(self, drift, noise):
        a = np.atleast_2d(np.asarray(drift, dtype=float))
        g = np.asarray(noise, dtype=float)
        if g.ndim == 0:
            g = g.reshape(1, 1)
        elif g.ndim == 1:
            g = g.reshape(-1, 1)
        if a.shape[0] != a.shape[1]:
            raise ValueError(f"drift must be square, got {a.shape}")
        if g.shape[0] != a.shape[0]:
            raise ValueError("noise map row count must match state dimension")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(g))):
            raise ValueError("model entries must be finite")
        object.__setattr__(self, "drift", a)
        object.__setattr__(self, "noise", g)

    @property
    def dim(self) -> int:
        return self.drift.shape[0]

    @property
    def noise_dim(self) -> int:
        return self.noise.shape[1]


def flow(model: OUModel, t: float) -> np.ndarray:
    """``exp(tA)``; exact identity at t = 0, rejected for |tA| > 700."""
    if t < 0:
        raise ValueError("flow requires t >= 0")
    if t == 0.0:
        return np.eye(model.dim)
    scale = abs(t) * float(np.linalg.norm(model.drift, 2))
    if scale > FLOW_NORM_LIMIT:
        raise Overflow(f"|tA| = {scale:.3e} exceeds {FLOW_NORM_LIMIT}")
    return scipy.linalg.expm(t * model.drift)


def flow_integral(model: OUModel, t: float) -> np.ndarray:
    """``M(t) = \\int_0^t S(r) dr`` via the augmented-block exponential.

    exp(t * [[A, I], [0, 0]]) = [[S(t), M(t)], [0, I]], valid for any A.
    """
    if t == 0.0:
        return np.zeros((model.dim, model.dim))
    m = model.dim
    aug = np.zeros((2 * m, 2 * m))
    aug[:m, :m] = model.drift
    aug[:m, m:] = np.eye(m)
    scale = abs(t) * float(np.linalg.norm(aug, 2))
    if scale > FLOW_NORM_LIMIT:
        raise Overflow(f"|t*aug| = {scale:.3e} exceeds {FLOW_NORM_LIMIT}")
    return scipy.linalg.expm(t * aug)[:m, m:]


def _gramian_gl(model: OUModel, t: float, n0: int = 16, rtol: float = 1e-12,
                max_doublings: int = 7) -> np.ndarray:
    gg = model.noise @ model.noise.T

    def level(n: int) -> np.ndarray:
        s, w = gauss_legendre(0.0, t, n)
        acc = np.zeros((model.dim, model.dim))
        for si, wi in zip(s, w):
            sm = flow(model, si)
            acc += wi * (sm @ gg @ sm.T)
        return acc

    prev = level(n0)
    n = n0
    rel_gap = np.inf
    for _ in range(max_doublings):
        n *= 2
        cur = level(n)
        scale = max(float(np.max(np.abs(cur))), 1e-300)
        rel_gap = float(np.max(np.abs(cur - prev))) / scale
        if rel_gap <= rtol:
            return 0.5 * (cur + cur.T)
        prev = cur
    if rel_gap > 1e-8:
        raise QuadratureDiverged(
            f"Gramian levels n={n // 2}, n={n} disagree by {rel_gap:.3e} relative")
    return 0.5 * (prev + prev.T)


def _gramian_lyap(model: OUModel, t: float, step: float) -> np.ndarray:
    """Independent oracle: RK4 on dQ/ds = A Q + Q A' + GG', Q(0) = 0."""
    gg = model.noise @ model.noise.T
    a = model.drift

    def rhs(q: np.ndarray) -> np.ndarray:
        return a @ q + q @ a.T + gg

    n_steps = max(1, int(np.ceil(t / step)))
    h = t / n_steps
    q = np.zeros((model.dim, model.dim))
    for _ in range(n_steps):
        k1 = rhs(q)
        k2 = rhs(q + 0.5 * h * k1)
        k3 = rhs(q + 0.5 * h * k2)
        k4 = rhs(q + h * k3)
        q = q + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return 0.5 * (q + q.T)


def gramian(model: OUModel, t: float, rule: str = "gauss-legendre",
            step: float = 1e-3) -> np.ndarray:
    """Noise Gramian ``Q_t``, PSD by construction of the integrand.

    ``rule`` is ``"gauss-legendre"`` (adaptive node doubling, default) or
    ``"lyapunov-ode"`` (fixed-step RK4 on the differential Lyapunov
    equation, kept as an independent cross-check).
    """
    if t < 0:
        raise ValueError("gramian requires t >= 0")
    if t == 0.0:
        return np.zeros((model.dim, model.dim))
    if rule == "gauss-legendre":
        return _gramian_gl(model, t)
    if rule == "lyapunov-ode":
        return _gramian_lyap(model, t, step)
    raise ValueError(f"unknown rule {rule!r}")


class GramianCurve:
    """Memoized ``t -> Q_t`` for one model and rule.

    Construction is single-writer (fill the cache, then share read-only);
    lookups after that are pure.
    """

    def __init__(self, model: OUModel, rule: str = "gauss-legendre"):
        self.model = model
        self.rule = rule
        self._cache: dict[float, np.ndarray] = {}

    def __call__(self, t: float) -> np.ndarray:
        key = float(t)
        if key not in self._cache:
            self._cache[key] = gramian(self.model, key, rule=self.rule)
        return self._cache[key]


def transition_measure(model: OUModel, t: float, x,
                       curve: GramianCurve | None = None) -> GaussianMeasure:
    """Law of the linear equation at time t started from x: N(S(t)x, Q_t)."""
    x = _as_vector(x, model.dim)
    q = curve(t) if curve is not None else gramian(model, t)
    return GaussianMeasure(flow(model, t) @ x, q)


def ou_expect(model: OUModel, t: float, f: Callable, x,
              method: Hermite | MonteCarlo = Hermite(40),
              curve: GramianCurve | None = None) -> Estimate:
    """Transition expectation ``E[f(S(t)x + Z)]`` with Z ~ N(0, Q_t)."""
    x = _as_vector(x, model.dim)
    if t == 0.0:
        pts = x[None, :]
        return Estimate(float(_eval_field(f, pts)[0]), 0.0)
    return gauss_expect(transition_measure(model, t, x, curve), f, method)


def ou_gradient(model: OUModel, t: float, f: Callable, x, y,
                method: Hermite | MonteCarlo = Hermite(40),
                curve: GramianCurve | None = None) -> Estimate:
    """Directional derivative ``<y, D T(t) f(x)>`` by the weighted expectation.

    The estimate is the expectation of ``f(S(t)x + z)`` against the
    isometric weight of ``S(t) y``; it requires S(t)y to pass the range
    test and is bounded by ``|f|_inf * |Q_t^{-1/2} S(t) y|``.
    """
    if t <= 0.0:
        raise ValueError("gradient representation requires t > 0")
    x = _as_vector(x, model.dim)
    y = _as_vector(y, model.dim)
    mu = transition_measure(model, t, x, curve)
    st_y = flow(model, t) @ y
    try:
        mu.factor.require_member(st_y)
    except Exception as exc:
        raise NotStrongFeller(
            f"S(t)y outside covariance range at t={t:g}", direction=y) from exc

    if isinstance(method, Hermite):
        pts, w = hermite_points(mu, method.order)
        weights = pw_weight(mu.factor, st_y, pts - mu.mean[None, :])
        vals = _eval_field(f, pts)
        return Estimate(float(np.dot(w, vals * weights)), 0.0)
    if isinstance(method, MonteCarlo):
        z = gauss_sample_centered(mu, method)
        weights = pw_weight(mu.factor, st_y, z)
        vals = _eval_field(f, mu.mean[None, :] + z)
        prod = vals * weights
        mean = float(np.mean(prod))
        stderr = float(np.std(prod, ddof=1) / np.sqrt(method.n))
        return Estimate(mean, stderr)
    raise TypeError(f"unknown method {method!r}")


def gauss_sample_centered(gm: GaussianMeasure, method: MonteCarlo) -> np.ndarray:
    root = gm.factor.sqrt_matrix()
    xi = substream(method.seed).standard_normal((method.n, root.shape[1]))
    return xi @ root.T


def sf_norm(model: OUModel, t: float, rank_tol: float = DEFAULT_RANK_TOL,
            curve: GramianCurve | None = None) -> float:
    """Smoothing norm ``phi(t)``: largest singular value of Q_t^{-1/2} S(t).

    Raises :class:`NotStrongFeller` (carrying the offending direction) if a
    column of S(t) has a component outside the retained range of Q_t.
    """
    if t <= 0.0:
        raise ValueError("sf_norm requires t > 0")
    q = curve(t) if curve is not None else gramian(model, t)
    cm = psd_factor(q, tol=rank_tol)
    st = flow(model, t)
    for j in range(model.dim):
        col = st[:, j]
        if not cm.contains(col):
            raise NotStrongFeller(
                f"flow column {j} outside covariance range at t={t:g}",
                direction=np.eye(model.dim)[:, j])
    u = cm.eigvecs[:, : cm.rank]
    scaled = (u / np.sqrt(cm.eigvals[: cm.rank])).T @ st  # rank x m
    return float(np.linalg.norm(scaled, 2))


def kalman_index(model: OUModel, rtol: float = 1e-10) -> int:
    """Smallest j with rank [G, AG, ..., A^j G] = m; NotControllable otherwise."""
    m = model.dim
    blocks = [model.noise]
    for j in range(m):
        mat = np.hstack(blocks)
        sv = np.linalg.svd(mat, compute_uv=False)
        rank = int(np.sum(sv > rtol * sv[0])) if sv[0] > 0 else 0
        if rank == m:
            return j
        blocks.append(model.drift @ blocks[-1])
    raise NotControllable(
        f"controllability matrix rank deficient at block j = {m - 1}")


class ScalingFit(NamedTuple):
    slope: float
    r_squared: float
    times: np.ndarray
    inv_sqrt_norms: np.ndarray


def sf_scaling_fit(model: OUModel, t_grid) -> ScalingFit:
    """Least-squares slope of log |Q_t^{-1/2}| against log t.

    For a controllable model with index k the slope approaches -(k + 1/2)
    in the small-time window. Raises NotControllable before fitting if the
    rank condition fails.
    """
    kalman_index(model)  # raises if uncontrollable
    t_grid = np.asarray(t_grid, dtype=float)
    norms = np.empty_like(t_grid)
    for i, t in enumerate(t_grid):
        q = gramian(model, float(t))
        lam_min = float(np.linalg.eigvalsh(q)[0])
        if lam_min <= 0:
            raise NotStrongFeller(f"Gramian singular at t = {t:g}")
        norms[i] = 1.0 / np.sqrt(lam_min)
    lx, ly = np.log(t_grid), np.log(norms)
    slope, intercept = np.polyfit(lx, ly, 1)
    resid = ly - (slope * lx + intercept)
    ss_tot = float(np.sum((ly - ly.mean()) ** 2))
    r2 = 1.0 - float(np.sum(resid**2)) / ss_tot if ss_tot > 0 else 1.0
    return ScalingFit(float(slope), r2, t_grid, norms)
