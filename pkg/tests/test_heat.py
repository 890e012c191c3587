import numpy as np
import pytest

from fellerkit.errors import AliasRisk, QuadratureDiverged
from fellerkit.heat import (
    HeatStepper,
    SpectralHeatModel,
    SpectralState,
    analyze,
    heat_drift_stability,
    heat_invariant,
    heat_sf_norm,
    heat_stationary,
    heat_step,
    hyp_check,
    phys_grid,
    synthesize,
)
from fellerkit.oumodel import OUModel, sf_norm
from fellerkit.rng import substream


class TestTransforms:
    def test_round_trip_identity(self):
        rng = substream(1)
        c = rng.standard_normal((5, 32))
        back = analyze(synthesize(c, 64), 32)
        assert np.max(np.abs(back - c)) <= 1e-10

    def test_parseval(self):
        rng = substream(2)
        c = rng.standard_normal(48)
        v = synthesize(c, 96)
        mode_energy = np.sum(c**2)
        phys_energy = np.sum(v**2) / (96 + 1)
        assert phys_energy == pytest.approx(mode_energy, rel=1e-10)

    def test_analyze_against_direct_sum(self):
        # brute-force projection oracle
        rng = substream(3)
        n_phys, n_modes = 40, 12
        v = rng.standard_normal(n_phys)
        x = phys_grid(n_phys)
        direct = np.array([
            np.sqrt(2.0) / (n_phys + 1) * np.sum(v * np.sin(k * np.pi * x))
            for k in range(1, n_modes + 1)
        ])
        np.testing.assert_allclose(analyze(v, n_modes), direct, atol=1e-12)

    def test_constant_function_coefficients(self):
        # low sine modes of the constant 1: sqrt(2)(1-(-1)^k)/(k pi)
        n_phys = 512
        coeffs = analyze(np.ones(n_phys), 8)
        for k in (1, 3, 5, 7):
            expected = np.sqrt(2.0) * 2.0 / (k * np.pi)
            assert coeffs[k - 1] == pytest.approx(expected, rel=1e-3)
        for k in (2, 4, 6, 8):
            assert abs(coeffs[k - 1]) <= 1e-12


class TestSfNorm:
    def test_single_mode_matches_scalar_model(self):
        # consistency with the finite-dimensional smoothing norm
        model = SpectralHeatModel(8, diffusivity=1.0)
        lam1 = float(model.eigenvalues[0])
        scalar = OUModel(-lam1, 1.0)
        for t in (0.01, 0.1, 1.0):
            expected = sf_norm(scalar, t)
            # mode 1 dominates the white-noise expression
            assert heat_sf_norm(model, t) == pytest.approx(expected, rel=1e-10)

    def test_small_time_slope(self):
        model = SpectralHeatModel(256)
        ts = np.geomspace(1e-4, 1e-2, 10)
        vals = [heat_sf_norm(model, t) for t in ts]
        slope = np.polyfit(np.log(ts), np.log(vals), 1)[0]
        assert slope == pytest.approx(-0.5, abs=0.05)

    def test_large_time_dominant_mode(self):
        model = SpectralHeatModel(64)
        lam1 = np.pi**2
        t = 3.0
        expected = np.exp(-lam1 * t) * np.sqrt(2 * lam1 / (1 - np.exp(-2 * lam1 * t)))
        assert heat_sf_norm(model, t) == pytest.approx(expected, rel=1e-12)


class TestHypCheck:
    def test_integrals_at_t1(self):
        model = SpectralHeatModel(128)
        chk = hyp_check(model, 1.0)
        assert np.isfinite(chk.smoothing_integral)
        # flow-norm integral closed form (1 - e^{-2 pi^2}) / (2 pi^2)
        expected = (1.0 - np.exp(-2.0 * np.pi**2)) / (2.0 * np.pi**2)
        assert chk.stability_integral == pytest.approx(expected, rel=1e-8)

    def test_stable_under_mode_doubling(self):
        chk = hyp_check(SpectralHeatModel(128), 1.0)
        assert chk.stable_under_n
        assert abs(chk.smoothing_integral_2n - chk.smoothing_integral) <= \
            1e-6 * chk.smoothing_integral

    def test_short_horizon_vanishes(self):
        model = SpectralHeatModel(32)
        small = hyp_check(model, 1e-6)
        assert small.smoothing_integral <= 5e-3
        assert small.stability_integral <= 2e-6

    def test_integrals_increase_with_horizon(self):
        # the tail decays like exp(-lam1 T); beyond T ~ 3 the increments sit
        # under quadrature noise, so monotonicity is asserted to that level
        model = SpectralHeatModel(32)
        i1 = [hyp_check(model, T).smoothing_integral for T in (0.5, 1.0, 5.0, 10.0)]
        assert all(np.isfinite(i1))
        assert all(b >= a - 1e-12 * abs(a) for a, b in zip(i1, i1[1:]))
        assert i1[1] > i1[0]


class TestHeatStep:
    def test_zero_drift_exact_mode_law(self):
        # one step from zero: mode k is centered normal with the exact
        # stationary-increment variance
        model = SpectralHeatModel(16)
        stepper = HeatStepper(model, dt=0.01)
        rng = substream(5)
        states = np.zeros((200_000, 16))
        states = stepper.step(states, None, rng)
        lam = model.eigenvalues
        expected = (1.0 - np.exp(-2.0 * lam * 0.01)) / (2.0 * lam)
        emp = states.var(axis=0)
        assert np.max(np.abs(emp - expected) / expected) <= 0.05

    def test_constant_drift_projection(self):
        # drift g = 1 adds (1-e^{-lam dt})/lam times the sine series of 1
        model = SpectralHeatModel(8)
        noiseless = HeatStepper(model, dt=0.05, phys_grid_n=512)
        noiseless.noise_sd = np.zeros(8)
        out = noiseless.step(np.zeros((1, 8)), lambda v: np.ones_like(v),
                             substream(0))[0]
        lam = model.eigenvalues
        k = np.arange(1, 9)
        series = np.sqrt(2.0) * (1.0 - (-1.0) ** k) / (k * np.pi)
        expected = (1.0 - np.exp(-lam * 0.05)) / lam * series
        np.testing.assert_allclose(out, expected, atol=2e-5)

    def test_alias_warning(self):
        model = SpectralHeatModel(32)
        with pytest.warns(AliasRisk):
            HeatStepper(model, dt=0.01, phys_grid_n=48)

    def test_state_api(self):
        model = SpectralHeatModel(8)
        state = SpectralState(np.zeros(8))
        out = heat_step(model, None, state, 0.01, substream(9))
        assert out.coeffs.shape == (8,)


class TestInvariantAndStationarity:
    def test_invariant_values(self):
        model = SpectralHeatModel(8)
        q = heat_invariant(model)
        assert q[0] == pytest.approx(1.0 / (2.0 * np.pi**2), rel=1e-12)
        assert q[0] == pytest.approx(0.0506606, abs=1e-7)

    def test_invariant_with_smoothing_exponent(self):
        model = SpectralHeatModel(8, noise_exponent=0.5)
        q = heat_invariant(model)
        lam = model.eigenvalues
        np.testing.assert_allclose(q, 1.0 / (2.0 * lam**2), rtol=1e-12)

    def test_stationary_mode_variance(self):
        model = SpectralHeatModel(16)
        run = heat_stationary(model, None, dt=0.01, n_paths=64, burn_in=2.0,
                              horizon=20.0, seed=7)
        target = heat_invariant(model)[0]
        assert abs(run.mode_variance[0] - target) <= 3.0 * run.mode_variance_err[0]

    def test_mode_decoupling(self):
        model = SpectralHeatModel(16)
        run = heat_stationary(model, None, dt=0.01, n_paths=64, burn_in=2.0,
                              horizon=20.0, seed=8)
        for i, j in ((0, 1), (0, 3), (2, 5)):
            cov, err = run.cross_covariance(i, j)
            assert abs(cov) <= 3.0 * err + 1e-4


class TestDriftStability:
    @staticmethod
    def _observable(states):
        # bounded functional of the midpoint value
        mid = synthesize(states, 2 * states.shape[-1])[..., states.shape[-1] - 1]
        return np.tanh(mid)

    def test_same_drift_zero_gap(self):
        model = SpectralHeatModel(16)
        g = lambda v: np.sign(v)
        gaps = heat_drift_stability(model, [g], g, self._observable, t=0.5,
                                    dt=0.01, n_paths=256, seed=3)
        assert gaps[0][0] == 0.0

    def test_mollified_gaps_decrease(self):
        model = SpectralHeatModel(16)
        g_seq = [lambda v, n=n: 0.5 * np.tanh(n * v) for n in (1, 4, 16, 64)]
        g_lim = lambda v: 0.5 * np.sign(v)
        gaps = heat_drift_stability(model, g_seq, g_lim, self._observable,
                                    t=0.5, dt=0.01, n_paths=2048, seed=4)
        vals = [g for g, _ in gaps]
        floor = 3.0 * gaps[-1][1]
        for a, b in zip(vals, vals[1:]):
            assert b < a or a <= 2.0 * max(floor, 1e-12)
        assert all(g <= 2.0 for g, _ in gaps)
