import numpy as np
import pytest
import scipy.integrate
import scipy.optimize

from fellerkit.errors import ExcessLeak, NoContraction, NotStrongFeller
from fellerkit.gridkern import apply_kernel, build_grid, build_ou_kernel, grid_function
from fellerkit.oumodel import OUModel, sf_norm
from fellerkit.perturb import (
    HorizonChoice,
    bt_kernel,
    br_lambda,
    choose_t0,
    constant_drift,
    clipped_linear_drift,
    drift_stability,
    markov_defect,
    mollified_sign_drift,
    phi_bound,
    pt_apply,
    resolvent_check,
    sign_drift,
    solve_perturbed,
    standard_test_family,
    volterra_apply,
    volterra_nodes,
    zero_drift,
)
from fellerkit.rng import substream

SCALAR = OUModel(-1.0, 1.0)
CHAIN = OUModel([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]])


@pytest.fixture(scope="module")
def grid128():
    return build_grid([-6.0], [6.0], [128])


@pytest.fixture(scope="module")
def const_choice():
    return choose_t0(SCALAR, constant_drift([1.0]), target_rho=0.5, q=16)


@pytest.fixture(scope="module")
def const_ps(grid128, const_choice):
    return solve_perturbed(SCALAR, constant_drift([1.0]), grid128,
                           const_choice.t0, tol=1e-10, q=16)


class TestDriftFields:
    def test_constant(self):
        f = constant_drift([1.0])
        assert f.sup_bound == 1.0
        np.testing.assert_array_equal(f(np.array([-2.0, 3.0])), [1.0, 1.0])

    def test_sign(self):
        f = sign_drift(0.5)
        np.testing.assert_array_equal(f(np.array([-2.0, 3.0])), [-0.5, 0.5])

    def test_mollified_converges_pointwise(self):
        x = np.array([-1.0, -0.1, 0.1, 1.0])
        f64 = mollified_sign_drift(64, 0.5)
        assert np.max(np.abs(f64(x) - 0.5 * np.sign(x))) < 1e-3

    def test_clipped_linear(self):
        f = clipped_linear_drift([[2.0]], bound=1.0)
        np.testing.assert_allclose(f(np.array([0.3, 5.0])), [0.6, 1.0])

    def test_bound_check_at_registration(self, grid128):
        from fellerkit.perturb import DriftField

        bad = DriftField(lambda x: 2.0 * np.ones_like(x), sup_bound=1.0, label="bad")
        with pytest.raises(ValueError):
            bad.at_nodes(grid128)


class TestBtKernel:
    def test_zero_drift_zero_kernel(self, grid128):
        k = bt_kernel(SCALAR, zero_drift(), 0.5, grid128, leak_tol=None)
        assert np.max(np.abs(k.weights)) == 0.0

    def test_annihilates_constants(self, grid128):
        k = bt_kernel(SCALAR, constant_drift([1.0]), 0.5, grid128, leak_tol=None)
        ones = grid_function(grid128, lambda y: np.ones_like(y), sup_bound=1.0)
        out = apply_kernel(k, ones)
        central = np.abs(grid128.points()) <= 2.0
        assert np.max(np.abs(out.values[central])) <= 1e-8
        # including the truncated signed mass, every row is exactly balanced
        assert np.max(np.abs(k.weights.sum(axis=1) + k.row_leak)) <= 1e-12

    def test_linear_observable_closed_form(self, grid128):
        # drift-weighted derivative of y -> y under the linear flow
        k = bt_kernel(SCALAR, constant_drift([1.0]), 0.5, grid128, leak_tol=None)
        f = grid_function(grid128, lambda y: y, sup_bound=6.0)
        out = apply_kernel(k, f)
        central = np.abs(grid128.points()) <= 2.0
        np.testing.assert_allclose(out.values[central], np.exp(-0.5), rtol=1e-10)

    def test_row_tv_bound(self, grid128):
        s = 0.5
        field = constant_drift([1.0])
        k = bt_kernel(SCALAR, field, s, grid128, leak_tol=None)
        bound = phi_bound(SCALAR, s) * field.sup_bound
        assert np.max(k.row_tv) <= bound + 1e-6

    def test_excess_leak_for_subcell_time(self, grid128):
        # unresolvably narrow transition: TV deficit trips the default gate
        with pytest.raises(ExcessLeak):
            bt_kernel(SCALAR, constant_drift([1.0]), 1e-5, grid128)

    def test_not_strong_feller_rank_deficient(self):
        model = OUModel(np.zeros((2, 2)), [[1.0], [0.0]])
        g = build_grid([-3.0, -3.0], [3.0, 3.0], [16, 16])
        with pytest.raises(NotStrongFeller):
            bt_kernel(model, constant_drift([1.0, 0.0]), 0.5, g, leak_tol=None)

    def test_2d_annihilates_constants(self):
        model = OUModel([[-1.0, 0.5], [0.0, -1.0]], np.eye(2))
        g = build_grid([-5.0, -5.0], [5.0, 5.0], [24, 24])
        k = bt_kernel(model, constant_drift([0.5, -0.3]), 0.6, g, leak_tol=None)
        rows_inside = np.linalg.norm(g.nodes, axis=1) <= 2.0
        sums = k.weights.sum(axis=1)
        assert np.max(np.abs(sums[rows_inside])) <= 1e-5


class TestChooseT0:
    def test_zero_drift(self):
        choice = choose_t0(SCALAR, zero_drift(), target_rho=0.5)
        assert choice.rho == 0.0

    def test_against_quad_brentq_oracle(self, const_choice):
        # independent 1-D quadrature plus bisection for the horizon with
        # integral exactly at the contraction target
        def phi(s):
            return np.exp(-s) * np.sqrt(2.0 / (1.0 - np.exp(-2.0 * s)))

        def integral(t):
            val, _ = scipy.integrate.quad(phi, 0.0, t, points=[0.0], limit=200)
            return val

        t_star = scipy.optimize.brentq(lambda t: integral(t) - 0.5, 1e-6, 1.0,
                                       xtol=1e-12)
        assert const_choice.t0 == pytest.approx(t_star, abs=1e-6)

    def test_node_doubling_stability(self):
        a = choose_t0(SCALAR, constant_drift([1.0]), q=16, quad_n=32)
        b = choose_t0(SCALAR, constant_drift([1.0]), q=16, quad_n=64)
        assert abs(a.rho - b.rho) < 1e-8

    def test_family_invariants(self, const_choice):
        s, u, w, _ = volterra_nodes(const_choice.t0, 24)
        assert np.all(np.diff(s) > 0)
        assert np.all(w > 0)
        assert abs(np.sum(w) - const_choice.t0) <= 1e-12

    def test_no_contraction_for_hypoelliptic_chain(self):
        # smoothing norm ~ t^{-3/2} is not locally integrable
        with pytest.raises(NoContraction):
            choose_t0(CHAIN, constant_drift([1.0, 0.0]), target_rho=0.5, quad_n=16)


class TestSolve:
    def test_zero_drift_exact(self, grid128):
        ps = solve_perturbed(SCALAR, zero_drift(), grid128, 0.25, q=12)
        for s, ker in zip(ps.family.s_nodes, ps.family.kernels):
            try:
                ou = build_ou_kernel(SCALAR, float(s), grid128, leak_tol=None).weights
            except Exception:
                continue
            assert np.max(np.abs(ker.weights - ou)) <= 1e-12
        assert ps.report.residual == 0.0
        assert ps.report.iterations == 0

    def test_constant_drift_node_oracle(self, const_ps, grid128):
        # shifted-mean closed form at the largest stored node
        x = grid128.points()
        central = np.abs(x) <= 2.0
        s = float(const_ps.family.s_nodes[-1])
        ker = const_ps.family.kernels[-1]
        f = grid_function(grid128, lambda y: y, sup_bound=6.0)
        got = (ker.weights @ f.values)[central]
        expected = (np.exp(-s) * x + (1.0 - np.exp(-s)))[central]
        assert np.max(np.abs(got - expected)) <= 5e-3

    def test_iteration_count_bound(self, const_ps):
        r = const_ps.report
        assert r.iterations <= np.log(1e-10) / np.log(r.rho) + 2

    def test_contraction_invariant(self, const_ps):
        assert const_ps.report.rho < 1.0
        assert const_ps.report.rho_measured <= const_ps.report.rho + 1e-12

    def test_residual_within_ten_tol(self, const_ps):
        assert const_ps.report.residual <= 10 * 1e-10

    def test_volterra_operator_contraction(self, const_ps, grid128):
        # measured operator gap on random kernel-family pairs
        rng = substream(21)
        q = len(const_ps.family.s_nodes)
        n = grid128.n_nodes
        field = constant_drift([1.0])
        from fellerkit.oumodel import GramianCurve

        curve = GramianCurve(SCALAR)
        b_mats = [bt_kernel(SCALAR, field, float(s), grid128, leak_tol=None,
                            curve=curve).weights for s in const_ps.family.s_nodes]
        for _ in range(3):
            fam1 = [rng.standard_normal((n, n)) * 0.01 for _ in range(q)]
            fam2 = [m + rng.standard_normal((n, n)) * 0.01 for m in fam1]
            out1 = volterra_apply(const_ps, fam1, b_mats)
            out2 = volterra_apply(const_ps, fam2, b_mats)
            gap_in = max(np.max(np.abs(a - b).sum(axis=1))
                         for a, b in zip(fam1, fam2))
            gap_out = max(np.max(np.abs(a - b).sum(axis=1))
                          for a, b in zip(out1, out2))
            assert gap_out <= const_ps.report.rho_measured * gap_in + 1e-12

    def test_no_contraction_raises(self, grid128):
        with pytest.raises(NoContraction):
            solve_perturbed(SCALAR, constant_drift([1.0]), grid128, 4.0, q=12)


class TestPtApply:
    def test_time_zero_identity(self, const_ps, grid128):
        f = grid_function(grid128, lambda y: np.sin(y), sup_bound=1.0)
        out = pt_apply(const_ps, 0.0, f)
        np.testing.assert_array_equal(out.values, f.values)

    def test_zero_drift_matches_ou(self, grid128):
        t0 = 0.25
        ps = solve_perturbed(SCALAR, zero_drift(), grid128, t0, q=12)
        f = grid_function(grid128, lambda y: np.tanh(y), sup_bound=1.0)
        out = pt_apply(ps, 2 * t0, f)
        direct = apply_kernel(build_ou_kernel(SCALAR, 2 * t0, grid128, leak_tol=None), f)
        central = np.abs(grid128.points()) <= 2.0
        assert np.max(np.abs(out.values - direct.values)[central]) <= 2e-3

    def test_constant_drift_closed_form_t1(self, const_ps, grid128):
        f = grid_function(grid128, lambda y: y, sup_bound=6.0)
        out = pt_apply(const_ps, 1.0, f)
        x = grid128.points()
        central = np.abs(x) <= 2.0
        expected = np.exp(-1.0) * x + (1.0 - np.exp(-1.0))
        assert np.max(np.abs(out.values - expected)[central]) <= 2e-2

    def test_markov_defect_within_budget(self, const_ps):
        for t in (0.5, 1.0):
            measured, budget = markov_defect(const_ps, t)
            assert measured <= budget + 1e-6

    def test_positivity_and_irreducibility(self, const_ps, grid128):
        ball = grid_function(grid128, lambda y: (np.abs(y) <= 1.0).astype(float),
                             sup_bound=1.0)
        out = pt_apply(const_ps, 0.5, ball)
        assert np.min(out.values) >= -1e-8
        assert np.all(out.values > 0.0)


class TestResolvent:
    def test_zero_drift_pure_quadrature(self, grid128):
        # with the fixed-point remainder rule both routes share the same
        # kernels at head times, leaving only quadrature-level error
        ps = solve_perturbed(SCALAR, zero_drift(), grid128, 0.25, q=12)
        f = grid_function(grid128, lambda y: y, sup_bound=6.0)
        rep = resolvent_check(ps, SCALAR, zero_drift(), 5.0, f, n_head=24, n_seg=12,
                              remainder="fixed-point")
        assert rep.residual <= 1e-6

    def test_constant_drift_closed_form(self, const_ps, grid128):
        # both routes equal x/(1+lam) + 1/(lam(1+lam))
        f = grid_function(grid128, lambda y: y, sup_bound=6.0)
        x = grid128.points()
        central = np.abs(x) <= 2.0
        for lam in (5.0, 10.0):
            rep = resolvent_check(const_ps, SCALAR, constant_drift([1.0]), lam, f,
                                  n_head=24, n_seg=12)
            closed = x / (1 + lam) + 1.0 / (lam * (1 + lam))
            assert rep.residual <= 1e-3
            assert np.max(np.abs(rep.lhs - closed)[central]) <= 2e-3
            assert np.max(np.abs(rep.rhs - closed)[central]) <= 2e-3

    def test_br_zero_drift(self, grid128):
        k = br_lambda(SCALAR, zero_drift(), 5.0, grid128)
        assert np.max(np.abs(k.weights)) == 0.0

    def test_br_tv_respects_laplace_bound(self, grid128):
        # row TV bounded by the Laplace transform of phi |F|, computed by
        # independent quadrature
        field = constant_drift([1.0])
        lam = 5.0
        k = br_lambda(SCALAR, field, lam, grid128)

        def integrand(t):
            return np.exp(-lam * t) * sf_norm(SCALAR, t)

        bound, _ = scipy.integrate.quad(integrand, 0.0, 10.0, points=[0.0], limit=200)
        assert np.max(k.row_tv) <= bound * field.sup_bound + 1e-8

    def test_br_norm_decreases_with_lambda(self, grid128):
        field = constant_drift([1.0])
        norms = [br_lambda(SCALAR, field, lam, grid128).op_norm
                 for lam in (5.0, 10.0, 20.0, 40.0)]
        assert all(a > b for a, b in zip(norms, norms[1:]))


class TestDriftStability:
    def test_same_drift_zero_gaps(self, grid128):
        f = grid_function(grid128, lambda y: np.tanh(y), sup_bound=1.0)
        field = sign_drift(0.5)
        gaps = drift_stability(SCALAR, [field, field], field, grid128, t=0.5,
                               f=f, q=12)
        assert max(gaps) <= 1e-12

    def test_mollified_gaps_decrease(self, grid128):
        f = grid_function(grid128, lambda y: np.tanh(y), sup_bound=1.0)
        fields = [mollified_sign_drift(n, 0.5) for n in (1, 4, 16)]
        gaps = drift_stability(SCALAR, fields, sign_drift(0.5), grid128, t=0.5,
                               f=f, q=12)
        assert gaps[0] > gaps[1] > gaps[2]
        assert max(gaps) <= 2.0 * f.sup_bound


class TestStrongFellerOfP:
    def test_tv_modulus_of_p_kernel(self, const_ps, grid128):
        # adjacent-row total variation of the solved endpoint kernel is
        # Lipschitz in the node spacing; the constant is reported, not pinned
        from fellerkit.gridkern import tv_row_distance

        h = grid128.spacing[0]
        x = grid128.points()
        central = np.where(np.abs(x) <= 2.0)[0]
        mods = [tv_row_distance(const_ps.p_t0, int(i), int(i) + 1) / h
                for i in central[:-1]]
        assert np.isfinite(max(mods))
        assert max(mods) <= 2.0 * sf_norm(SCALAR, const_ps.t0) + 1.0
