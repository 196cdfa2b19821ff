"""Penalized precision fitting: thresholds, certificates, paths, selection."""

import numpy as np
import pytest
from scipy.optimize import minimize_scalar

import plngraph as pg
from plngraph.errors import InvalidInputError


def random_cov(p, seed, factor=3):
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((p, factor * p))
    s = a @ a.T / (factor * p)
    d = np.sqrt(np.diag(s))
    return s / np.outer(d, d)


def kkt_check(omega, s, lam, tol):
    """Independent statement of the subgradient optimality conditions."""
    sigma = np.linalg.inv(omega)
    p = s.shape[0]
    for i in range(p):
        assert abs(sigma[i, i] - s[i, i]) <= tol
        for k in range(p):
            if i == k:
                continue
            r = sigma[i, k] - s[i, k]
            if omega[i, k] != 0.0:
                assert abs(r - lam * np.sign(omega[i, k])) <= tol
            else:
                assert abs(r) <= lam + tol


class TestGlassoFit:
    def test_full_shrinkage_is_exactly_diagonal(self):
        s = np.array([[1.0, 0.5, -0.2], [0.5, 2.0, 0.3], [-0.2, 0.3, 1.5]])
        cov = pg.CovarianceInput(s=s, n=50)
        est = pg.glasso_fit(cov, lam=pg.lambda_max(s))
        assert est.support == frozenset()
        np.testing.assert_array_equal(est.omega, np.diag(1.0 / np.diag(s)))

    def test_unpenalized_fit_inverts(self):
        s = random_cov(6, seed=1)
        est = pg.glasso_fit(pg.CovarianceInput(s=s, n=50), lam=0.0)
        np.testing.assert_allclose(est.omega, np.linalg.inv(s), atol=1e-6)

    def test_two_variable_closed_form(self):
        s = np.array([[1.0, 0.5], [0.5, 1.0]])
        est = pg.glasso_fit(pg.CovarianceInput(s=s, n=50), lam=0.2)

        # scalar oracle: the optimum has Sigma diagonal equal to s and a free
        # off-diagonal t, so maximize the objective over t alone
        def neg_obj(t):
            sig = np.array([[1.0, t], [t, 1.0]])
            om = np.linalg.inv(sig)
            return -(
                np.linalg.slogdet(om)[1] - np.sum(s * om) - 0.2 * 2 * abs(om[0, 1])
            )

        t_star = minimize_scalar(neg_obj, bounds=(-0.99, 0.99), method="bounded").x
        oracle = np.linalg.inv(np.array([[1.0, t_star], [t_star, 1.0]]))
        assert est.omega[0, 1] == pytest.approx(oracle[0, 1], abs=1e-5)
        # soft-thresholded covariance 0.5 - 0.2 = 0.3 in closed form
        assert est.omega[0, 1] == pytest.approx(-0.3 / (1 - 0.09), abs=1e-6)

    def test_certificate_on_random_inputs(self):
        for seed, p in [(0, 5), (1, 10), (2, 20)]:
            s = random_cov(p, seed)
            for lam in (0.05, 0.3):
                est = pg.glasso_fit(pg.CovarianceInput(s=s, n=100), lam)
                kkt_check(est.omega, s, lam, tol=1e-6)

    def test_warm_start_agrees_with_cold(self):
        s = random_cov(12, seed=5)
        cov = pg.CovarianceInput(s=s, n=80)
        cold = pg.glasso_fit(cov, 0.1)
        warm = pg.glasso_fit(cov, 0.1, warm_start=pg.glasso_fit(cov, 0.2))
        np.testing.assert_allclose(cold.omega, warm.omega, atol=1e-6)

    def test_objective_never_decreases_across_sweeps(self):
        for seed in range(5):
            s = random_cov(15, seed=seed + 40)
            trace: list = []
            pg.glasso_fit(pg.CovarianceInput(s=s, n=60), 0.08, objective_trace=trace)
            diffs = np.diff(np.asarray(trace))
            assert np.all(diffs >= -1e-9), diffs.min()

    def test_permutation_equivariance(self):
        s = random_cov(8, seed=7)
        cov = pg.CovarianceInput(s=s, n=60)
        est = pg.glasso_fit(cov, 0.1)
        rng = np.random.default_rng(3)
        perm = rng.permutation(8)
        s_perm = s[np.ix_(perm, perm)]
        est_perm = pg.glasso_fit(pg.CovarianceInput(s=s_perm, n=60), 0.1)
        np.testing.assert_allclose(
            est_perm.omega, est.omega[np.ix_(perm, perm)], atol=1e-6
        )

    def test_scaling_at_zero_penalty(self):
        s = random_cov(5, seed=11)
        a = pg.glasso_fit(pg.CovarianceInput(s=s, n=50), 0.0)
        b = pg.glasso_fit(pg.CovarianceInput(s=4.0 * s, n=50), 0.0)
        np.testing.assert_allclose(b.omega, a.omega / 4.0, atol=1e-6)

    def test_rejects_non_psd_input(self):
        s = np.array([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(InvalidInputError):
            pg.CovarianceInput(s=s, n=10)

    def test_zero_penalty_requires_strict_pd(self):
        s = np.array([[1.0, 1.0], [1.0, 1.0]])
        cov = pg.CovarianceInput(s=s, n=10)
        with pytest.raises(InvalidInputError):
            pg.glasso_fit(cov, 0.0)


class TestSurrogateObjective:
    def test_identity_value(self):
        cov = pg.CovarianceInput(s=np.eye(3), n=10)
        assert pg.surrogate_objective(np.eye(3), cov, lam=0.7) == pytest.approx(-3.0)

    def test_hand_evaluation(self):
        cov = pg.CovarianceInput(s=np.eye(2), n=10)
        val = pg.surrogate_objective(np.diag([2.0, 2.0]), cov, lam=1.0)
        assert val == pytest.approx(2 * np.log(2.0) - 4.0)

    def test_fit_beats_diagonal_start(self):
        for seed in range(50):
            s = random_cov(8, seed=100 + seed)
            cov = pg.CovarianceInput(s=s, n=60)
            est = pg.glasso_fit(cov, 0.1)
            start = np.diag(1.0 / np.diag(s))
            assert est.objective >= pg.surrogate_objective(start, cov, 0.1) - 1e-9

    def test_rejects_indefinite(self):
        cov = pg.CovarianceInput(s=np.eye(2), n=10)
        with pytest.raises(InvalidInputError):
            pg.surrogate_objective(np.diag([1.0, -1.0]), cov, 0.1)


class TestLambdaGrid:
    def test_identity_is_degenerate(self):
        grid = pg.lambda_grid(pg.CovarianceInput(s=np.eye(4), n=10), count=5)
        assert grid.degenerate
        assert grid.values.size == 1

    def test_geometric_interpolation(self):
        s = np.array([[2.0, 1.0], [1.0, 2.0]])
        grid = pg.lambda_grid(pg.CovarianceInput(s=s, n=10), count=3, ratio=0.01)
        np.testing.assert_allclose(grid.values, [1.0, 0.1, 0.01], rtol=1e-12)

    def test_first_point_empties_support(self):
        s = random_cov(6, seed=3)
        cov = pg.CovarianceInput(s=s, n=40)
        grid = pg.lambda_grid(cov, count=4)
        est = pg.glasso_fit(cov, float(grid.values[0]))
        assert est.support == frozenset()


class TestFitPath:
    def test_single_lambda_equals_direct_fit(self):
        s = random_cov(6, seed=9)
        cov = pg.CovarianceInput(s=s, n=50)
        path = pg.fit_path(cov, np.array([0.15]))
        direct = pg.glasso_fit(cov, 0.15)
        np.testing.assert_allclose(path.estimates[0].omega, direct.omega, atol=1e-10)

    def test_identity_path_is_diagonal(self):
        cov = pg.CovarianceInput(s=np.eye(5), n=30)
        path = pg.fit_path(cov, np.array([0.5, 0.1, 0.01]))
        for est in path.estimates:
            assert est.support == frozenset()

    def test_warm_matches_cold_objectives(self):
        s = random_cov(10, seed=13)
        cov = pg.CovarianceInput(s=s, n=70)
        lambdas = pg.lambda_grid(cov, count=8).values
        path = pg.fit_path(cov, lambdas, tol=1e-6)
        for lam, est in zip(lambdas, path.estimates):
            cold = pg.glasso_fit(cov, float(lam), tol=1e-6)
            assert abs(est.objective - cold.objective) <= 10 * 1e-6

    def test_support_nearly_monotone(self):
        checks = []
        for seed in (0, 1, 2):
            s = random_cov(12, seed=200 + seed)
            cov = pg.CovarianceInput(s=s, n=60)
            path = pg.fit_path(cov, pg.lambda_grid(cov, count=30).values)
            sizes = [est.n_edges for est in path.estimates]
            checks.extend(b >= a for a, b in zip(sizes, sizes[1:]))
        assert np.mean(checks) >= 0.95

    def test_rejects_increasing_sequence(self):
        cov = pg.CovarianceInput(s=np.eye(3), n=10)
        with pytest.raises(InvalidInputError):
            pg.fit_path(cov, np.array([0.1, 0.2]))


class TestEbicSelect:
    def _path(self, s, n, count=12):
        cov = pg.CovarianceInput(s=s, n=n)
        return pg.fit_path(cov, pg.lambda_grid(cov, count=count).values), cov

    def test_gamma_zero_reduces_to_bic(self):
        s = random_cov(8, seed=23)
        path, _ = self._path(s, n=60)
        lam0, est0 = pg.ebic_select(path, gamma_ebic=0.0, n=60, p=8)
        scores = path.ebic_scores.copy()
        # classical BIC recomputed independently from the fit summaries
        bics = []
        for est in path.estimates:
            gauss = est.objective + est.lam * (np.abs(est.omega).sum() - np.trace(np.abs(est.omega)))
            bics.append(-60 * gauss + est.n_edges * np.log(60))
        np.testing.assert_allclose(scores, bics, rtol=1e-10)
        assert lam0 == path.lambdas[int(np.argmin(bics))]

    def test_tie_breaks_to_sparser_model(self):
        # two identical-likelihood estimates: penalty favors fewer edges
        diag = pg.PrecisionEstimate(omega=np.eye(3), lam=1.0, objective=-3.0)
        dense_omega = np.eye(3) + 0.2 * (np.ones((3, 3)) - np.eye(3))
        dense = pg.PrecisionEstimate(
            omega=dense_omega, lam=0.5, objective=-3.0 - 0.5 * 1.2
        )
        path = pg.RegularizationPath(
            lambdas=np.array([1.0, 0.5]), estimates=[diag, dense]
        )
        _, best = pg.ebic_select(path, gamma_ebic=0.5, n=50, p=3)
        assert best is diag

    def test_hub_recovery_regression(self):
        # self-baseline on a seeded hub instance (not a literature number);
        # edge weight 0.28 keeps the instance positive-definite while giving
        # the selection enough per-edge signal
        graph = pg.gen_hub(p=30, n_hubs=3, seed=0)
        build = pg.graph_to_precision(graph, diag=1.0, edge_weight=0.28, seed=1)
        beta = np.random.default_rng(2).uniform(0.0, 2.0, size=30)
        params = pg.PlnParams(beta=beta, precision=build.omega)
        data = pg.sample_pln(params, 150, seed=3)
        mat = pg.apply_method(data, "ONESTEP")
        s = np.cov(mat, rowvar=False, bias=True)
        cov = pg.CovarianceInput(s=s, n=150)
        path = pg.fit_path(cov, pg.lambda_grid(cov, count=30).values)
        _, best = pg.ebic_select(path, gamma_ebic=0.5, n=150, p=30)
        truth = graph.edges
        found = best.support
        recall = len(found & truth) / len(truth)
        fdr = len(found - truth) / max(len(found), 1)
        assert recall > 0.5
        assert fdr < 0.5


class TestSerialization:
    def test_edge_tsv_sorted_by_weight(self, tmp_path):
        s = random_cov(6, seed=31)
        est = pg.glasso_fit(pg.CovarianceInput(s=s, n=50), 0.05)
        path = tmp_path / "edges.tsv"
        pg.write_edges_tsv(est, [f"g{i}" for i in range(6)], path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "var_i\tvar_k\tomega_ik"
        weights = [abs(float(line.split("\t")[2])) for line in lines[1:]]
        assert weights == sorted(weights, reverse=True)
        assert len(weights) == est.n_edges
