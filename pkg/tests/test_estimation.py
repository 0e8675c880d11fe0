import numpy as np
import pytest
from scipy.stats import multivariate_normal

from geokrige.estimation import (TABLE1_BOX, FitResult, fit_mple, godambe, log_pseudolik,
                                 log_pseudolik_and_grad, pseudo_score)
from geokrige.kernels import ERR_IID, ErrorModel, InducedGram, KernelSpec, base_cov
from geokrige.simstudy import make_design

NONE = ErrorModel(ERR_IID, 0.0)


def simulate(theta, obs, rng, s2u=0.0):
    spec = KernelSpec(*theta)
    z = obs + np.sqrt(s2u) * rng.standard_normal(obs.shape)
    return np.linalg.cholesky(base_cov(spec, z)) @ rng.standard_normal(len(obs))


class TestLogPseudolik:
    def test_scalar(self):
        # n = 1: K = [[tau2 + sigma2_x]]
        v = log_pseudolik([1.5, 1.0, 0.5], NONE, [[0.0, 0.0]], [0.7])
        np.testing.assert_allclose(v, -0.5 * np.log(2.0) - 0.49 / 4.0, rtol=1e-14)

    def test_density_oracle(self, rng):
        obs = rng.uniform(0, 3, (3, 2))
        y = rng.standard_normal(3)
        th = [1.3, 0.6, 0.2]
        ref = multivariate_normal(np.zeros(3), base_cov(KernelSpec(*th), obs)).logpdf(y)
        np.testing.assert_allclose(log_pseudolik(th, NONE, obs, y), ref + 1.5 * np.log(2 * np.pi),
                                   rtol=1e-12)

    def test_scaling_identity(self, rng):
        obs = rng.uniform(0, 3, (5, 2))
        y = rng.standard_normal(5)
        err = ErrorModel(ERR_IID, 0.3)
        a = log_pseudolik([1.0, 0.5, 0.1], err, obs, y)
        b = log_pseudolik([4.0, 0.5, 0.4], err, obs, 2 * y)
        np.testing.assert_allclose(b - a, -5 * np.log(2.0), rtol=1e-12)

    def test_singular_is_minus_inf(self):
        obs = np.zeros((2, 2))  # coincident records, no nugget, no error
        assert log_pseudolik([1.0, 1.0, 0.0], NONE, obs, [1.0, 1.0]) == -np.inf

    @pytest.mark.parametrize("s2u", [0.0, 0.4])
    def test_gradient(self, rng, s2u):
        obs = rng.uniform(0, 4, (8, 2))
        err = ErrorModel(ERR_IID, s2u)
        for _ in range(5):
            th = np.array([rng.uniform(0.3, 3), rng.uniform(0.05, 2), rng.uniform(0.01, 1)])
            y = simulate(th, obs, rng)
            _, g = log_pseudolik_and_grad(th, err, obs, y)
            for k in range(3):
                h = 1e-6 * th[k]
                tp, tm = th.copy(), th.copy()
                tp[k] += h
                tm[k] -= h
                fd = (log_pseudolik(tp, err, obs, y) - log_pseudolik(tm, err, obs, y)) / (2 * h)
                np.testing.assert_allclose(g[k], fd, rtol=1e-5, atol=1e-7)

    def test_score_unbiased(self):
        rng = np.random.default_rng(3)
        obs = rng.uniform(0, 4, (10, 2))
        th, s2u = np.array([1.0, 0.5, 0.1]), 0.3
        err = ErrorModel(ERR_IID, s2u)
        gram = InducedGram("sqexp", err, obs)
        scores = np.array([pseudo_score(th, err, obs, simulate(th, obs, rng, s2u), gram=gram)
                           for _ in range(500)])
        se = scores.std(axis=0, ddof=1) / np.sqrt(500)
        assert np.all(np.abs(scores.mean(axis=0)) <= 4 * se)


class TestFit:
    def test_within_box_and_not_below_truth(self):
        rng = np.random.default_rng(0)
        design = make_design(0)
        th = np.array([1.0, 0.1, 0.01])
        for _ in range(5):
            y = simulate(th, design.obs, rng)
            fit = fit_mple(NONE, design.obs, y, n_restarts=4, seed=1)
            assert isinstance(fit, FitResult)
            for k, name in enumerate(("tau2", "beta", "sigma2_x")):
                lo, hi = TABLE1_BOX[name]
                assert lo <= fit.theta_hat[k] <= hi
            assert fit.log_pseudolik >= log_pseudolik(th, NONE, design.obs, y) - 1e-8
            assert len(fit.restarts) == 4

    def test_beta_recovery(self):
        rng = np.random.default_rng(1)
        design = make_design(0)
        th = np.array([1.0, 0.1, 0.01])
        hits = 0
        for _ in range(20):
            y = simulate(th, design.obs, rng)
            b = fit_mple(NONE, design.obs, y, n_restarts=4, seed=2).theta_hat[1]
            hits += 1 / 3 <= b / 0.1 <= 3
        assert hits >= 18

    def test_zero_data_hits_lower_bounds(self):
        design = make_design(0)
        fit = fit_mple(NONE, design.obs, np.zeros(len(design.obs)), n_restarts=3, seed=0)
        np.testing.assert_allclose(fit.theta_hat[0], TABLE1_BOX["tau2"][0], rtol=1e-3)
        np.testing.assert_allclose(fit.theta_hat[2], TABLE1_BOX["sigma2_x"][0], rtol=1e-3)

    def test_deterministic(self, rng):
        obs = rng.uniform(0, 4, (12, 2))
        y = simulate([1.0, 0.5, 0.1], obs, rng, 0.2)
        err = ErrorModel(ERR_IID, 0.2)
        a = fit_mple(err, obs, y, n_restarts=3, seed=5)
        b = fit_mple(err, obs, y, n_restarts=3, seed=5)
        np.testing.assert_array_equal(a.theta_hat, b.theta_hat)

    def test_empty_box(self):
        with pytest.raises(ValueError):
            fit_mple(NONE, [[0.0, 0.0]], [1.0], box={"beta": (1.0, 1.0)})


class TestGodambe:
    def test_no_error_equals(self, rng):
        obs = rng.uniform(0, 4, (7, 2))
        g = godambe([1.0, 0.5, 0.1], NONE, obs, n_mc_outer=10)
        np.testing.assert_array_equal(g.G, g.H)
        np.testing.assert_allclose(g.I_godambe, g.H, rtol=1e-8)

    def test_tau2_only(self):
        # K = tau2 I when sites are far apart and there is no nugget
        obs = np.array([[0.0, 0.0], [50.0, 0.0], [0.0, 50.0], [50.0, 50.0]])
        g = godambe([2.0, 1.0, 0.0], NONE, obs, params=("tau2",))
        np.testing.assert_allclose(g.H, [[4 / (2 * 2.0 ** 2)]], rtol=1e-12)

    def test_symmetric_and_psd(self, rng):
        obs = rng.uniform(0, 4, (6, 2))
        g = godambe([1.0, 0.5, 0.1], ErrorModel(ERR_IID, 0.3), obs, n_mc_outer=300, seed=1)
        np.testing.assert_allclose(g.G, g.G.T)
        np.testing.assert_allclose(g.H, g.H.T)
        assert np.linalg.eigvalsh(g.H).min() >= -1e-10

    def test_information_loss(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            obs = rng.uniform(0, 4, (6, 2))
            th = [rng.uniform(0.5, 2), rng.uniform(0.1, 1.5), rng.uniform(0.01, 0.5)]
            g = godambe(th, ErrorModel(ERR_IID, rng.uniform(0.05, 1.0)), obs, n_mc_outer=400,
                        seed=int(rng.integers(1 << 30)))
            ev = np.linalg.eigvalsh(g.H - g.I_godambe)
            assert ev.min() >= -0.05 * np.abs(np.linalg.eigvalsh(g.H)).max()
