"""Shared quadrature helpers.

Two rules are used throughout the package:

* plain Gauss-Legendre on a finite interval, with adaptive node doubling
  for smooth integrands, and
* the square-root substitution ``s = u**2`` for integrands with an
  integrable ``s**(-1/2)``-type singularity at 0 (the strong Feller norm).
  Under the substitution, ``\\int_0^T g(s) ds = \\int_0^{sqrt(T)} g(u^2) 2u du``
  and the transformed integrand is bounded.
"""

from __future__ import annotations

import numpy as np

from .errors import QuadratureDiverged

_leggauss_cache: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def gauss_legendre(a: float, b: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes and weights on [a, b]."""
    if n not in _leggauss_cache:
        _leggauss_cache[n] = np.polynomial.legendre.leggauss(n)
    x, w = _leggauss_cache[n]
    half = 0.5 * (b - a)
    return a + half * (x + 1.0), half * w


def sqrt_nodes(t0: float, n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Nodes for ``\\int_0^{t0} g(s) ds`` under ``s = u**2``.

    Returns ``(s_nodes, u_nodes, weights)`` where ``s_nodes = u_nodes**2``
    and ``sum(w_j g(s_j)) ~ \\int_0^{t0} g``. The weights absorb the ``2u``
    Jacobian, so ``sum(weights) == t0`` exactly up to rounding.
    """
    u, v = gauss_legendre(0.0, np.sqrt(t0), n)
    return u * u, u, 2.0 * u * v


def integrate_sqrt(g, t0: float, n: int = 32) -> float:
    """Integrate ``g`` on [0, t0] with the square-root substitution."""
    s, _, w = sqrt_nodes(t0, n)
    return float(np.dot(w, [g(si) for si in s]))


def integrate_adaptive(g, a: float, b: float, n0: int = 8, rtol: float = 1e-10,
                       max_doublings: int = 8, divergence_tol: float = 1e-8):
    """Gauss-Legendre with node doubling until two levels agree.

    Raises :class:`QuadratureDiverged` if the final two refinement levels
    still disagree by more than ``divergence_tol`` relative.
    """
    def level(n):
        x, w = gauss_legendre(a, b, n)
        vals = np.array([g(xi) for xi in x])
        return np.tensordot(w, vals, axes=(0, 0))

    prev = level(n0)
    n = n0
    rel_gap = np.inf
    for _ in range(max_doublings):
        n *= 2
        cur = level(n)
        scale = max(float(np.max(np.abs(cur))), 1e-300)
        rel_gap = float(np.max(np.abs(cur - prev))) / scale
        if rel_gap <= rtol:
            return cur
        prev = cur
    if rel_gap > divergence_tol:
        raise QuadratureDiverged(
            f"levels n={n // 2} and n={n} disagree by {rel_gap:.3e} relative")
    return prev
