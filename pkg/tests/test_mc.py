import numpy as np
import pytest
import scipy.stats

from fellerkit.errors import Unstable
from fellerkit.gridkern import build_grid, build_ou_kernel, grid_function
from fellerkit.mc import (
    ExpEulerStepper,
    MCConfig,
    euler_step,
    invariant_estimate,
    mc_transition,
    mc_vs_semigroup,
    mixing_check,
    sample_transition,
)
from fellerkit.oumodel import OUModel, flow, flow_integral, gramian
from fellerkit.perturb import (
    choose_t0,
    constant_drift,
    sign_drift,
    solve_perturbed,
    zero_drift,
)
from fellerkit.rng import substream

SCALAR = OUModel(-1.0, 1.0)


@pytest.fixture(scope="module")
def zero_ps():
    grid = build_grid([-6.0], [6.0], [128])
    return solve_perturbed(SCALAR, zero_drift(), grid, 0.25, q=12)


class TestEulerStep:
    def test_one_step_law_exact_ks(self):
        # empirical one-step law against the Gaussian the grid kernel uses
        dt, x = 0.1, 1.3
        cfg = MCConfig(dt=dt, n_paths=100_000, seed=11)
        states = sample_transition(SCALAR, None, [x], dt, cfg)[:, 0]
        mean = flow(SCALAR, dt)[0, 0] * x
        sd = np.sqrt(gramian(SCALAR, dt)[0, 0])
        stat, _ = scipy.stats.kstest(states, "norm", args=(mean, sd))
        assert stat < 1.628 / np.sqrt(states.shape[0])  # 1% critical value

    def test_constant_drift_mean_exact(self):
        # telescoping of the exact integrator on constant drift: the mean
        # after k steps is S(t)x + int_0^t S(r) c dr, independent of dt
        dt, x, c, t = 0.25, 2.0, 1.0, 1.0
        cfg = MCConfig(dt=dt, n_paths=200_000, seed=3)
        est = mc_transition(SCALAR, constant_drift([c]), [x], t, lambda y: y, cfg)
        expected = np.exp(-t) * x + (1.0 - np.exp(-t)) * c
        assert abs(est.mean - expected) <= 3.0 * est.stderr

    def test_deterministic_ode_limit(self):
        # zero noise map: reduces to the exact linear+drift integrator
        model = OUModel(-1.0, 0.0)
        dt = 0.01
        rng = substream(0)
        x = np.array([2.0])
        for _ in range(100):
            x = euler_step(model, constant_drift([1.0]), x, dt, rng)
        expected = np.exp(-1.0) * 2.0 + (1.0 - np.exp(-1.0))
        assert x[0] == pytest.approx(expected, rel=1e-12)

    def test_flow_integral_matches_quadrature(self):
        model = OUModel([[-1.0, 0.5], [0.0, -2.0]], np.eye(2))
        m = flow_integral(model, 0.7)
        from fellerkit.quadrature import gauss_legendre

        s, w = gauss_legendre(0.0, 0.7, 40)
        ref = sum(wi * flow(model, si) for si, wi in zip(s, w))
        assert np.max(np.abs(m - ref)) < 1e-12


class TestMcTransition:
    def test_ou_mean(self):
        cfg = MCConfig(dt=0.05, n_paths=100_000, seed=1)
        est = mc_transition(SCALAR, None, [2.0], 1.0, lambda y: y, cfg)
        assert abs(est.mean - 2.0 * np.exp(-1.0)) <= 3.0 * est.stderr

    def test_constant_observable(self):
        cfg = MCConfig(dt=0.1, n_paths=2000, seed=2)
        est = mc_transition(SCALAR, None, [0.0], 0.5, lambda y: np.ones_like(y), cfg)
        assert est.mean == 1.0
        assert est.stderr == 0.0

    def test_seed_determinism(self):
        cfg = MCConfig(dt=0.1, n_paths=20_000, seed=42)
        a = mc_transition(SCALAR, sign_drift(0.5), [0.5], 1.0, lambda y: y, cfg)
        b = mc_transition(SCALAR, sign_drift(0.5), [0.5], 1.0, lambda y: y, cfg)
        assert a == b

    def test_clt_scaling(self):
        base = MCConfig(dt=0.1, n_paths=10_000, seed=5)
        quad = MCConfig(dt=0.1, n_paths=40_000, seed=5)
        e1 = mc_transition(SCALAR, None, [0.0], 0.5, lambda y: y, base)
        e4 = mc_transition(SCALAR, None, [0.0], 0.5, lambda y: y, quad)
        assert e4.stderr == pytest.approx(e1.stderr / 2.0, rel=0.1)

    def test_dt_robustness_bounded_drift(self):
        # halving dt moves the estimate by at most max(2 stderr, C dt)
        field = sign_drift(0.5)
        means = {}
        for dt in (0.02, 0.01):
            cfg = MCConfig(dt=dt, n_paths=100_000, seed=9)
            means[dt] = mc_transition(SCALAR, field, [0.5], 1.0, lambda y: y, cfg)
        gap = abs(means[0.02].mean - means[0.01].mean)
        allowance = max(2.0 * (means[0.02].stderr + means[0.01].stderr), 2.0 * 0.02)
        assert gap <= allowance

    def test_t_not_multiple_of_dt(self):
        cfg = MCConfig(dt=0.3, n_paths=2000, seed=0)
        with pytest.raises(ValueError):
            mc_transition(SCALAR, None, [0.0], 1.0, lambda y: y, cfg)


class TestMcVsSemigroup:
    def test_zero_drift_z_scores(self, zero_ps):
        cfg = MCConfig(dt=0.05, n_paths=50_000, seed=17)
        points = [-2.0, -1.0, 0.0, 1.0, 2.0]
        rows = mc_vs_semigroup(zero_ps, SCALAR, None, points, 1.0,
                               lambda y: np.tanh(y), cfg)
        # allow one excursion; grid bias is below stderr at this resolution
        n_ok = sum(1 for r in rows if abs(r.z) <= 3.0)
        assert n_ok >= len(rows) - 1

    def test_budget_recorded(self, zero_ps):
        cfg = MCConfig(dt=0.05, n_paths=5_000, seed=17)
        rows = mc_vs_semigroup(zero_ps, SCALAR, None, [0.0], 0.5,
                               lambda y: y, cfg, budgets=[0.01])
        assert rows[0].budget == 0.01


class TestInvariant:
    def test_ou_stationary_moments(self):
        cfg = MCConfig(dt=0.02, n_paths=4096, seed=23)
        est = invariant_estimate(SCALAR, None, cfg, burn_in=4.0, horizon=40.0)
        assert abs(est.mean[0]) <= 3.0 * est.mean_err[0] + 1e-3
        assert abs(est.cov[0, 0] - 0.5) <= 3.0 * est.cov_err[0, 0]

    def test_constant_drift_shifts_mean(self):
        # invariant mean solves A mu + c = 0
        cfg = MCConfig(dt=0.02, n_paths=4096, seed=29)
        est = invariant_estimate(SCALAR, constant_drift([1.0]), cfg,
                                 burn_in=4.0, horizon=40.0)
        assert abs(est.mean[0] - 1.0) <= 4.0 * est.mean_err[0]

    def test_unstable_model_rejected(self):
        cfg = MCConfig(dt=0.01, n_paths=1000, seed=0)
        with pytest.raises(Unstable):
            invariant_estimate(OUModel(1.0, 1.0), None, cfg, 1.0, 2.0)

    def test_histogram_support(self):
        grid = build_grid([-6.0], [6.0], [64])
        cfg = MCConfig(dt=0.02, n_paths=2048, seed=31)
        est = invariant_estimate(SCALAR, None, cfg, burn_in=2.0, horizon=20.0,
                                 grid=grid)
        hist = est.hist
        assert hist is not None
        assert hist.sum() == pytest.approx(1.0, abs=1e-12)
        x = grid.points()
        assert hist[np.abs(x) <= 1.0].sum() > 0.5


class TestMixing:
    def test_same_point_zero(self, zero_ps):
        out = mixing_check(zero_ps, lambda y: np.tanh(y), [1.0], [1.0], [0.5, 1.0])
        assert all(gap == 0.0 for _, gap in out)

    def test_ou_linear_gap_exact(self, zero_ps):
        # linear observable: gap decays like the flow between the points
        out = mixing_check(zero_ps, lambda y: y, [2.0], [-1.0], [0.5, 1.0, 2.0])
        grid = zero_ps.grid
        x = grid.points()
        x1 = x[np.argmin(np.abs(x - 2.0))]
        x2 = x[np.argmin(np.abs(x + 1.0))]
        for t, gap in out:
            assert gap == pytest.approx(np.exp(-t) * abs(x1 - x2), rel=0.02)

    def test_sign_drift_gap_decreasing(self):
        grid = build_grid([-6.0], [6.0], [128])
        field = sign_drift(0.5)
        choice = choose_t0(SCALAR, field, q=16)
        ps = solve_perturbed(SCALAR, field, grid, choice.t0, q=16)
        out = mixing_check(ps, lambda y: np.tanh(y), [2.0], [-2.0],
                           [0.5, 1.0, 2.0, 4.0])
        gaps = [g for _, g in out]
        assert all(a > b for a, b in zip(gaps, gaps[1:]))


class TestInvarianceIdentity:
    def test_ou_invariance_under_semigroup(self):
        # integral of P(t)f against the empirical invariant law equals the
        # integral of f, within batch error
        grid = build_grid([-6.0], [6.0], [128])
        ps = solve_perturbed(SCALAR, zero_drift(), grid, 0.25, q=12)
        cfg = MCConfig(dt=0.02, n_paths=4096, seed=37)
        est = invariant_estimate(SCALAR, None, cfg, burn_in=4.0, horizon=40.0,
                                 grid=grid)
        f = grid_function(grid, lambda y: np.tanh(y), sup_bound=1.0)
        from fellerkit.perturb import pt_apply

        ptf = pt_apply(ps, 1.0, f).values
        per_batch = est.batch_hist @ (ptf - f.values)
        gap = float(np.mean(per_batch))
        err = float(np.std(per_batch, ddof=1) / np.sqrt(est.n_batches))
        assert abs(gap) <= 2.0 * err + 1e-4
