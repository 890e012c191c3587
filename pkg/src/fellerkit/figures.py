"""Figure rendering for the report path.

Each subcommand gets one PNG summarizing its suite, written next to the
JSON report and the CSV tables. Rendering is headless (Agg) and purely a
function of the data arrays passed in.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def _finish(fig, outdir: str | Path, name: str) -> Path:
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    path = outdir / name
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)
    return path


def kalman_figure(outdir, curves: dict[str, tuple[np.ndarray, np.ndarray, float]]) -> Path:
    """Log-log scaling of the inverse Gramian root norm with fitted slopes."""
    fig, ax = plt.subplots(figsize=(6, 4.5))
    for label, (ts, norms, slope) in curves.items():
        ax.loglog(ts, norms, "o", ms=4, label=f"{label} (slope {slope:.3f})")
        coef = np.polyfit(np.log(ts), np.log(norms), 1)
        ax.loglog(ts, np.exp(coef[1]) * ts ** coef[0], "-", lw=1, alpha=0.7)
    ax.set_xlabel("t")
    ax.set_ylabel(r"$\|Q_t^{-1/2}\|$")
    ax.legend()
    ax.grid(True, which="both", alpha=0.3)
    return _finish(fig, outdir, "kalman_scaling.png")


def perturb_figure(outdir, x: np.ndarray, got: np.ndarray, expected: np.ndarray,
                   resolvent_levels: list[tuple[int, float]]) -> Path:
    """Constant-drift oracle comparison plus resolvent residual convergence."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    ax1.plot(x, expected, "-", lw=2, label="closed form")
    ax1.plot(x, got, "--", lw=1.5, label="solved semigroup")
    ax1.set_xlabel("x")
    ax1.set_ylabel("P(t) f (x)")
    ax1.legend()
    ax1.grid(alpha=0.3)
    if resolvent_levels:
        ns = [n for n, _ in resolvent_levels]
        rs = [r for _, r in resolvent_levels]
        ax2.loglog(ns, rs, "o-")
        ax2.set_xlabel("quadrature nodes")
        ax2.set_ylabel("resolvent residual")
        ax2.grid(True, which="both", alpha=0.3)
    return _finish(fig, outdir, "perturb_oracle.png")


def zscore_figure(outdir, labels: list[str], zs: np.ndarray) -> Path:
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.axhspan(-3, 3, color="tab:green", alpha=0.15)
    ax.plot(np.arange(len(zs)), zs, "o")
    ax.set_xticks(np.arange(len(labels)))
    ax.set_xticklabels(labels, rotation=60, fontsize=7)
    ax.set_ylabel("z score (budget subtracted)")
    ax.grid(alpha=0.3)
    return _finish(fig, outdir, "mc_zscores.png")


def invariant_figure(outdir, centers: np.ndarray, hist: np.ndarray,
                     reference_pdf: np.ndarray | None,
                     mixing: list[tuple[float, float]]) -> Path:
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 4))
    width = centers[1] - centers[0]
    ax1.bar(centers, hist / width, width=width, alpha=0.5,
            label="empirical invariant law")
    if reference_pdf is not None:
        ax1.plot(centers, reference_pdf, "-", lw=2, label="reference density")
    ax1.set_xlabel("x")
    ax1.legend(fontsize=8)
    ax1.grid(alpha=0.3)
    ts = [t for t, _ in mixing]
    gaps = [g for _, g in mixing]
    ax2.semilogy(ts, gaps, "o-")
    ax2.set_xlabel("t")
    ax2.set_ylabel("|P(t)f(x1) - P(t)f(x2)|")
    ax2.grid(True, which="both", alpha=0.3)
    return _finish(fig, outdir, "invariant_mixing.png")


def heat_figure(outdir, ts: np.ndarray, norms: np.ndarray, slope: float,
                modes: np.ndarray, emp_var: np.ndarray, exact_var: np.ndarray,
                gaps: list[tuple[float, float]]) -> Path:
    fig, axes = plt.subplots(1, 3, figsize=(12, 4))
    axes[0].loglog(ts, norms, "o-", label=f"slope {slope:.3f}")
    axes[0].set_xlabel("t")
    axes[0].set_ylabel("smoothing norm")
    axes[0].legend()
    axes[0].grid(True, which="both", alpha=0.3)
    axes[1].semilogy(modes, emp_var, "o", label="empirical")
    axes[1].semilogy(modes, exact_var, "-", label="stationary law")
    axes[1].set_xlabel("mode")
    axes[1].set_ylabel("variance")
    axes[1].legend()
    axes[1].grid(True, which="both", alpha=0.3)
    ns = np.arange(1, len(gaps) + 1)
    axes[2].semilogy(ns, [g for g, _ in gaps], "o-", label="gap")
    axes[2].semilogy(ns, [3 * e for _, e in gaps], "--", label="3x MC floor")
    axes[2].set_xlabel("mollification level")
    axes[2].legend()
    axes[2].grid(True, which="both", alpha=0.3)
    return _finish(fig, outdir, "heat_suite.png")
