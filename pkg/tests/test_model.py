"""Model sampling, marginal moments and initial estimates."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import plngraph as pg
from plngraph.errors import InvalidInputError, UninformativeVariableError


def _params_1d(beta, sigma2):
    return pg.PlnParams(beta=np.array([beta]), precision=np.array([[1.0 / sigma2]]))


class TestCountMatrix:
    def test_rejects_negative(self):
        with pytest.raises(InvalidInputError):
            pg.CountMatrix(np.array([[1, -1]]), ("a", "b"), ("s1",))

    def test_rejects_fractional(self):
        with pytest.raises(InvalidInputError):
            pg.CountMatrix(np.array([[1.5, 2.0]]), ("a", "b"), ("s1",))

    def test_rejects_duplicate_names(self):
        with pytest.raises(InvalidInputError):
            pg.CountMatrix(np.array([[1, 2], [3, 4]]), ("a", "a"), ("s1", "s2"))

    def test_accepts_integral_floats(self):
        m = pg.CountMatrix(np.array([[1.0, 2.0], [3.0, 4.0]]), ("a", "b"), ("s1", "s2"))
        assert m.values.dtype == np.int64


class TestSamplePln:
    def test_vanishing_rate_gives_zeros(self):
        data = pg.sample_pln(_params_1d(-30.0, 1.0), n=5, seed=1)
        assert np.all(data.values == 0)

    def test_determinism(self):
        params = pg.PlnParams(
            beta=np.array([0.5, 1.0]),
            precision=np.array([[1.2, -0.3], [-0.3, 0.9]]),
        )
        a = pg.sample_pln(params, 200, seed=42)
        b = pg.sample_pln(params, 200, seed=42)
        assert np.array_equal(a.values, b.values)
        c = pg.sample_pln(params, 200, seed=43)
        assert not np.array_equal(a.values, c.values)

    def test_marginal_mean_matches_theory(self):
        # E[Y] = exp(beta + sigma^2/2) = exp(0.5) for beta 0, unit variance
        data = pg.sample_pln(_params_1d(0.0, 1.0), n=100_000, seed=7)
        y = data.values[:, 0].astype(float)
        se = y.std(ddof=1) / np.sqrt(y.size)
        assert abs(y.mean() - np.exp(0.5)) < 3 * se

    def test_independent_coordinates_uncorrelated(self):
        params = pg.PlnParams(
            beta=np.array([0.0, 0.5]), precision=np.diag([1.0, 2.0])
        )
        data = pg.sample_pln(params, 100_000, seed=11)
        r = np.corrcoef(data.values.T)[0, 1]
        assert abs(r) < 3.0 / np.sqrt(data.n)

    def test_invalid_precision_rejected(self):
        with pytest.raises(InvalidInputError):
            pg.PlnParams(beta=np.zeros(2), precision=np.array([[1.0, 2.0], [2.0, 1.0]]))


class TestMarginalMoments:
    def test_degenerate_normal_is_poisson(self):
        mean, second = pg.pln_marginal_moments(0.0, 1e-12)
        assert mean == pytest.approx(1.0, abs=1e-9)
        assert second == pytest.approx(2.0, abs=1e-9)

    def test_unit_variance_values(self):
        mean, second = pg.pln_marginal_moments(0.0, 1.0)
        assert mean == pytest.approx(np.exp(0.5), rel=1e-12)
        assert second == pytest.approx(np.exp(0.5) + np.exp(2.0), rel=1e-12)

    def test_mean_only_example(self):
        mean, _ = pg.pln_marginal_moments(2.0, 0.5)
        assert mean == pytest.approx(np.exp(2.25), rel=1e-12)

    def test_overflow_saturates_with_warning(self):
        with pytest.warns(RuntimeWarning):
            _, second = pg.pln_marginal_moments(400.0, 10.0)
        assert np.isinf(second)

    def test_exact_plugin_inversion(self):
        beta, sigma = pg.invert_marginal_moments(np.exp(0.5), np.exp(0.5) + np.exp(2.0))
        assert beta == pytest.approx(0.0, abs=1e-12)
        assert sigma == pytest.approx(1.0, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(
        beta=st.floats(-2.0, 4.0),
        sigma=st.floats(0.1, 3.0),
    )
    def test_moment_round_trip(self, beta, sigma):
        m1, m2 = pg.pln_marginal_moments(beta, sigma)
        back_beta, back_sigma = pg.invert_marginal_moments(m1, m2)
        assert abs(back_beta - beta) < 1e-10
        assert abs(back_sigma - sigma) < 1e-10


class TestMomentInit:
    def test_recovers_simulated_truth(self):
        data = pg.sample_pln(_params_1d(1.5, 0.8), n=200_000, seed=5)
        est = pg.moment_init(data)
        assert abs(est.beta0[0] - 1.5) < 0.05
        assert abs(est.sigma0_diag[0] - 0.8) < 0.05
        assert not est.flags[0]

    def test_constant_column_clamped_and_flagged(self):
        values = np.full((10, 1), 5)
        data = pg.CountMatrix(values, ("g1",), tuple(f"s{i}" for i in range(10)))
        est = pg.moment_init(data)
        assert est.flags[0]
        assert est.sigma0_diag[0] == pytest.approx(pg.model.SIGMA_FLOOR)
        assert est.beta0[0] == pytest.approx(np.log(5) - pg.model.SIGMA_FLOOR / 2)

    def test_all_zero_column_rejected_by_name(self):
        values = np.column_stack([np.zeros(10, dtype=int), np.arange(10)])
        data = pg.CountMatrix(values, ("dead", "live"), tuple(f"s{i}" for i in range(10)))
        with pytest.raises(UninformativeVariableError, match="dead"):
            pg.moment_init(data)

    def test_consistency_improves_with_n(self):
        beta, sigma = 1.0, 0.6
        params = _params_1d(beta, sigma)
        wins = 0
        trials = 20
        for trial in range(trials):
            small = pg.moment_init(pg.sample_pln(params, 2000, seed=1000 + trial))
            big = pg.moment_init(pg.sample_pln(params, 200_000, seed=2000 + trial))
            err_small = np.hypot(small.beta0[0] - beta, small.sigma0_diag[0] - sigma)
            err_big = np.hypot(big.beta0[0] - beta, big.sigma0_diag[0] - sigma)
            wins += err_big < err_small
        assert wins >= 0.95 * trials

    def test_serialization_round_trip(self):
        data = pg.sample_pln(_params_1d(1.0, 0.5), n=500, seed=2)
        est = pg.moment_init(data)
        back = pg.InitialEstimate.from_dict(est.to_dict())
        np.testing.assert_array_equal(back.beta0, est.beta0)
        np.testing.assert_array_equal(back.sigma0_diag, est.sigma0_diag)
        assert back.origin == est.origin
        np.testing.assert_array_equal(back.flags, est.flags)


class TestFitTrend:
    def test_collinear_points(self):
        logm = np.linspace(0.0, 3.0, 40)
        logv = 2.0 * logm + 0.7
        trend = pg.fit_trend_points(logm, logv)
        expected = np.array([1.0, 2.0]) / np.sqrt(5.0)
        np.testing.assert_allclose(trend.pc, expected, atol=1e-12)
        pts = np.column_stack([logm, logv])
        np.testing.assert_allclose(trend.project(pts), pts, atol=1e-10)

    def test_two_points_give_difference_direction(self):
        a = np.array([0.3, 1.1])
        b = np.array([1.7, 0.2])
        trend = pg.fit_trend_points(np.array([a[0], b[0]]), np.array([a[1], b[1]]))
        direction = (a - b) / np.linalg.norm(a - b)
        if direction[0] < 0:
            direction = -direction
        np.testing.assert_allclose(trend.pc, direction, atol=1e-12)

    def test_recovers_generating_eigenvector(self):
        rng = np.random.default_rng(21)
        cov = np.array([[1.0, 0.9], [0.9, 1.0]])
        pts = rng.multivariate_normal([2.0, 4.0], cov, size=500)
        trend = pg.fit_trend_points(pts[:, 0], pts[:, 1])
        target = np.array([1.0, 1.0]) / np.sqrt(2.0)
        angle = np.degrees(np.arccos(np.clip(abs(trend.pc @ target), 0, 1)))
        assert angle < 2.0

    def test_zero_variance_variable_rejected(self):
        values = np.column_stack([np.full(10, 3), np.arange(1, 11)])
        data = pg.CountMatrix(values, ("flat", "ok"), tuple(f"s{i}" for i in range(10)))
        with pytest.raises(UninformativeVariableError, match="flat"):
            pg.fit_trend(data)

    def test_projection_residuals_orthogonal(self):
        params = pg.PlnParams(
            beta=np.array([0.5, 1.0, 1.5, 2.0]),
            precision=np.diag([2.0, 1.0, 0.8, 1.5]),
        )
        data = pg.sample_pln(params, 400, seed=3)
        trend = pg.fit_trend(data)
        pts = np.column_stack([trend.log_means, trend.log_vars])
        residuals = pts - trend.project(pts)
        assert np.max(np.abs(residuals @ trend.pc)) < 1e-10


class TestMirnaShrinkInit:
    @pytest.fixture()
    def data(self):
        params = pg.PlnParams(
            beta=np.array([0.5, 1.0, 1.5, 2.0, 2.5]),
            precision=np.diag([2.0, 1.0, 0.8, 1.5, 1.2]),
        )
        return pg.sample_pln(params, 500, seed=9)

    def test_gamma_one_limit_matches_moment_init(self, data):
        trend = pg.fit_trend(data)
        shrunk = pg.mirna_shrink_init(data, trend, gamma=1 - 1e-12)
        base = pg.moment_init(data)
        np.testing.assert_allclose(shrunk.beta0, base.beta0, atol=1e-6)
        np.testing.assert_allclose(shrunk.sigma0_diag, base.sigma0_diag, atol=1e-6)

    def test_gamma_zero_limit_lands_on_trend(self, data):
        trend = pg.fit_trend(data)
        shrunk = pg.mirna_shrink_init(data, trend, gamma=1e-12)
        assert not np.any(shrunk.flags)
        # invert the fitted moments back to the blended (mean, variance) pair
        for i in range(data.p):
            m1, m2 = pg.pln_marginal_moments(shrunk.beta0[i], shrunk.sigma0_diag[i])
            point = np.array([np.log(m1), np.log(m2 - m1 * m1)])
            residual = point - trend.project(point)[0]
            assert np.linalg.norm(residual) < 1e-9

    def test_point_on_trend_is_gamma_invariant(self):
        # with two variables both log-points lie exactly on the fitted line
        params = pg.PlnParams(beta=np.array([1.0, 2.0]), precision=np.diag([1.0, 0.7]))
        data = pg.sample_pln(params, 400, seed=13)
        trend = pg.fit_trend(data)
        a = pg.mirna_shrink_init(data, trend, gamma=0.1)
        b = pg.mirna_shrink_init(data, trend, gamma=0.9)
        np.testing.assert_allclose(a.beta0, b.beta0, atol=1e-9)
        np.testing.assert_allclose(a.sigma0_diag, b.sigma0_diag, atol=1e-9)

    def test_blend_is_strictly_between(self, data):
        trend = pg.fit_trend(data)
        means = data.values.astype(float).mean(axis=0)
        shrunk = pg.mirna_shrink_init(data, trend, gamma=0.5)
        pts = np.column_stack([trend.log_means, trend.log_vars])
        proj = trend.project(pts)
        for i in range(data.p):
            if shrunk.flags[i]:
                continue
            m1, _ = pg.pln_marginal_moments(shrunk.beta0[i], shrunk.sigma0_diag[i])
            lo, hi = sorted((means[i], np.exp(proj[i, 0])))
            if hi - lo > 1e-9:
                assert lo < m1 < hi

    def test_rejects_mismatched_trend(self, data):
        other = pg.sample_pln(
            pg.PlnParams(beta=np.array([0.5, 1.0, 1.5, 2.0, 2.5]),
                         precision=np.diag([2.0, 1.0, 0.8, 1.5, 1.2])),
            500,
            seed=10,
        )
        trend = pg.fit_trend(other)
        with pytest.raises(InvalidInputError):
            pg.mirna_shrink_init(data, trend, gamma=0.5)


class TestEbGamma:
    def test_shrinkage_limits(self):
        assert pg.shrinkage_gamma(1e-12, 1.0) == pytest.approx(1.0, abs=1e-9)
        assert pg.shrinkage_gamma(1e12, 1.0) == pytest.approx(0.0, abs=1e-9)

    def test_equal_variances_halve_the_distance(self):
        # posterior mean (d / s2) / (1/s2 + 1/s2) = d / 2
        gamma = pg.shrinkage_gamma(0.37, 0.37)
        assert gamma == pytest.approx(0.5, rel=1e-12)

    def test_bootstrap_weights_and_determinism(self):
        params = pg.PlnParams(
            beta=np.array([0.5, 1.0, 1.5, 2.0, 2.5, 3.0]),
            precision=np.diag([2.0, 1.0, 0.8, 1.5, 1.2, 0.9]),
        )
        data = pg.sample_pln(params, 300, seed=17)
        trend = pg.fit_trend(data)
        a = pg.eb_gamma(data, trend, bootstrap_reps=60, seed=99)
        b = pg.eb_gamma(data, trend, bootstrap_reps=60, seed=99)
        np.testing.assert_array_equal(a.gamma, b.gamma)
        assert np.all((a.gamma > 0) & (a.gamma < 1))
        assert a.sigma_r2 >= 1e-6
        assert not np.any(a.flagged)

    def test_rejects_small_bootstrap(self):
        params = pg.PlnParams(beta=np.array([1.0, 2.0]), precision=np.diag([1.0, 0.7]))
        data = pg.sample_pln(params, 100, seed=1)
        trend = pg.fit_trend(data)
        with pytest.raises(InvalidInputError):
            pg.eb_gamma(data, trend, bootstrap_reps=10, seed=0)
