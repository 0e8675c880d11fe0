import numpy as np
import pytest

from geokrige.diagnostics import ess, weights_ess
from geokrige.kernels import ERR_GEO, ERR_IID, ERR_NONE, GEODESIC, SQEXP, ErrorModel, KernelSpec
from geokrige.kernels import base_cov
from geokrige.kriging import kale_krige
from geokrige.sampler import (ChainState, HMCConfig, LocationPosterior, PriorSpec, _energy,
                              _leapfrog, _Metric, hmc_batch, importance_reweight,
                              log_posterior_and_grad, posterior_predict, run_hmc)


class StdNormal:
    def __init__(self, dim=2):
        self.dim = dim

    def __call__(self, q):
        return -0.5 * np.sum(q * q, axis=1), -q

    def initial_inv_mass(self):
        return np.ones(self.dim)


def rngs(n, seed=0):
    return [np.random.default_rng([seed, i]) for i in range(n)]


def fd_check(model, q, h=1e-6, rtol=1e-5):
    _, g = model(q)
    for k in range(q.shape[1]):
        e = np.zeros_like(q)
        e[:, k] = h
        fd = (model(q + e)[0] - model(q - e)[0]) / (2 * h)
        np.testing.assert_allclose(g[:, k], fd, rtol=rtol, atol=1e-6 * np.abs(g).max())


class TestEngine:
    def test_standard_normal_moments(self):
        model = StdNormal()
        draws = []
        cfg = HMCConfig(n_chains=4, n_warmup=300, n_draws=2500, n_leapfrog=8)
        r = rngs(4)
        q0 = np.stack([x.standard_normal(2) * 2 for x in r])
        stats = hmc_batch(model, q0, r, cfg, on_draw=lambda k, q: draws.append(q.copy()))
        x = np.stack(draws, axis=1)  # (chains, draws, 2)
        flat = x.reshape(-1, 2)
        se_mean = flat.std(axis=0) / np.sqrt(ess(x))
        assert np.all(np.abs(flat.mean(axis=0)) <= 3 * se_mean)
        sq = x ** 2
        se_var = sq.reshape(-1, 2).std(axis=0) / np.sqrt(ess(sq))
        assert np.all(np.abs(flat.var(axis=0) - 1.0) <= 3 * se_var)
        cross = x[..., 0] * x[..., 1]
        assert abs(cross.mean()) <= 3 * cross.std() / np.sqrt(ess(cross))
        assert 0.6 < stats["accept"].mean() < 0.99
        assert stats["divergences"].sum() == 0

    def test_energy_error_second_order(self):
        model = StdNormal(3)
        metric = _Metric(np.ones((64, 3)))
        r = np.random.default_rng(0)
        q, p = r.standard_normal((64, 3)), r.standard_normal((64, 3))
        lp, g = model(q)
        med = []
        for eps in (0.2, 0.1, 0.05, 0.025):
            L = int(round(0.8 / eps))
            q1, p1, lp1, _ = _leapfrog(model, q, p, lp, g, np.full(64, eps), metric, L)
            med.append(np.median(np.abs(_energy(lp1, p1, metric) - _energy(lp, p, metric))))
        for a, b in zip(med, med[1:]):
            assert 3.0 < a / b < 5.0

    def test_dense_metric_moments(self):
        model = StdNormal()
        draws = []
        cfg = HMCConfig(n_chains=2, n_warmup=300, n_draws=2000, n_leapfrog=8, dense_mass=True)
        r = rngs(2, 5)
        hmc_batch(model, np.zeros((2, 2)), r, cfg, on_draw=lambda k, q: draws.append(q.copy()))
        np.testing.assert_allclose(np.concatenate(draws).var(axis=0), 1.0, atol=0.15)

    def test_zero_density_start_rejected(self):
        class Dead(StdNormal):
            def __call__(self, q):
                return np.full(q.shape[0], -np.inf), np.zeros_like(q)
        with pytest.raises(FloatingPointError):
            hmc_batch(Dead(), np.zeros((1, 2)), rngs(1), HMCConfig(n_warmup=4, n_draws=4))


class TestLogPosterior:
    def setup_method(self):
        r = np.random.default_rng(1)
        self.obs = r.uniform(0, 3, (6, 2))
        self.y = r.standard_normal((2, 6))

    @pytest.mark.parametrize("sample", [(), ("tau2", "beta", "sigma2_x")])
    def test_gradient_sqexp(self, sample):
        model = LocationPosterior(SQEXP, ErrorModel(ERR_IID, 0.2), self.obs, self.y,
                                  {"tau2": 1.0, "beta": 0.8, "sigma2_x": 0.05}, sample,
                                  PriorSpec(tau2=(0.1, 5), beta=(0.05, 3), sigma2_x=(0.01, 1)))
        r = np.random.default_rng(2)
        for _ in range(25):
            fd_check(model, 0.5 * r.standard_normal((2, model.dim)))

    def test_gradient_geodesic(self):
        obs = np.array([[0.0, 40.0], [4.0, 42.0], [8.0, 45.0], [2.0, 50.0], [10.0, 48.0]])
        model = LocationPosterior(GEODESIC, ErrorModel(ERR_GEO, 7500.0), obs,
                                  np.array([[0.5, -0.2, 1.0, 0.3, -0.7]]),
                                  {"tau2": 1.0, "beta": 0.002, "sigma2_x": 0.1}, ("beta",),
                                  PriorSpec(beta=(1e-4, 1e-2)))
        r = np.random.default_rng(3)
        sd = np.sqrt(model.initial_inv_mass())
        for _ in range(25):
            fd_check(model, (sd * r.standard_normal(model.dim))[None], h=1e-7)

    def test_translation_changes_prior_only(self):
        err = ErrorModel(ERR_IID, 0.5)
        th = {"tau2": 1.0, "beta": 0.5, "sigma2_x": 0.1}
        model = LocationPosterior(SQEXP, err, self.obs, self.y[:1], th)
        u = 0.3 * np.random.default_rng(4).standard_normal((6, 2))
        c = np.array([0.7, -0.4])
        a = model(u.ravel()[None])[0][0]
        b = model((u + c).ravel()[None])[0][0]
        prior_delta = -0.5 * np.sum((u + c) ** 2 - u ** 2) / 0.5
        np.testing.assert_allclose(b - a, prior_delta, rtol=1e-9)

    def test_small_error_gradient_is_prior(self):
        err = ErrorModel(ERR_IID, 1e-8)
        model = LocationPosterior(SQEXP, err, self.obs, self.y[:1],
                                  {"tau2": 1.0, "beta": 0.5, "sigma2_x": 0.1})
        u = 1e-4 * np.random.default_rng(5).standard_normal((1, 12))
        _, g = model(u)
        np.testing.assert_allclose(g, -u / 1e-8, rtol=1e-3)

    def test_coincident_sites_zero_density(self):
        model = LocationPosterior(SQEXP, ErrorModel(ERR_IID, 0.1), np.zeros((2, 2)),
                                  np.array([[1.0, 0.5]]), {"tau2": 1.0, "beta": 1.0, "sigma2_x": 0.0})
        lp, g = model(np.zeros((1, 4)))
        assert lp[0] == -np.inf
        np.testing.assert_array_equal(g, 0.0)

    def test_state_wrapper(self):
        prior = PriorSpec(beta=(0.1, 2.0))
        st = ChainState(np.zeros((6, 2)), {"tau2": 1.0, "beta": 0.5, "sigma2_x": 0.1})
        lp, g = log_posterior_and_grad(st, prior, SQEXP, ErrorModel(ERR_IID, 0.2), self.obs,
                                       self.y[0], sample=("beta",))
        assert np.isfinite(lp) and g.shape == (13,)
        st.theta["beta"] = 5.0
        assert log_posterior_and_grad(st, prior, SQEXP, ErrorModel(ERR_IID, 0.2), self.obs,
                                      self.y[0], sample=("beta",))[0] == -np.inf


def is_oracle(spec, s2u, obs, y, target, n=200_000, seed=0):
    """Posterior mean and variance of x(target) by sampling u from its prior."""
    r = np.random.default_rng(seed)
    smooth = KernelSpec(spec.tau2, spec.beta, 0.0)
    lw, mu, var = np.empty(n), np.empty(n), np.empty(n)
    for b in range(n):
        z = obs + np.sqrt(s2u) * r.standard_normal(obs.shape)
        C = base_cov(spec, z)
        c = np.linalg.cholesky(C)
        a = np.linalg.solve(c, y)
        lw[b] = -np.sum(np.log(np.diag(c))) - 0.5 * a @ a
        k = np.linalg.solve(c, base_cov(smooth, z, target)[:, 0])
        mu[b] = k @ a
        var[b] = spec.tau2 - k @ k
    w = np.exp(lw - lw.max())
    w /= w.sum()
    m = w @ mu
    return m, w @ var + w @ (mu - m) ** 2


@pytest.mark.slow
class TestPosterior:
    def test_matches_importance_oracle(self):
        obs = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0], [2.0, 0.5], [0.5, 2.0]])
        y = np.array([1.2, 0.8, 1.0, 0.5, 0.1, 0.4])
        spec = KernelSpec(1.0, 1.0, 0.01)
        target = np.array([[0.5, 0.5]])
        m_ref, v_ref = is_oracle(spec, 0.3, obs, y, target, n=40_000)
        s = run_hmc(None, SQEXP, obs, y, target,
                    HMCConfig(n_chains=4, n_warmup=500, n_draws=1500, seed=3),
                    err=ErrorModel(ERR_IID, 0.3), theta=spec)
        np.testing.assert_allclose(s.mean[0], m_ref, atol=0.03)
        np.testing.assert_allclose(s.pred_var[0], v_ref, atol=0.02)
        assert s.max_rhat < 1.1

    def test_bimodal_labels(self):
        # two records on a line with large errors: both orderings are plausible
        obs = np.array([[0.0], [1.0]])
        err = ErrorModel(ERR_IID, 2.0, dim=1)
        cfg = HMCConfig(n_chains=4, n_warmup=500, n_draws=2000, kappa=1.0, seed=1)
        s = run_hmc(None, SQEXP, obs, np.array([1.0, 0.3]), [[0.5]], cfg, err=err,
                    theta=KernelSpec(1.0, 1.0, 1e-4))
        pos = s.draws["position"].reshape(-1, 2)
        lw = s.draws["log_weights"].ravel()
        w = np.exp(lw - lw.max())
        w /= w.sum()
        swapped = (obs[0, 0] + pos[:, 0]) > (obs[1, 0] + pos[:, 1])
        assert 0.1 <= w[swapped].sum() <= 0.9

    def test_no_error_known_theta_is_kriging(self, rng):
        obs = rng.uniform(0, 3, (5, 2))
        y = rng.standard_normal(5)
        spec = KernelSpec(1.0, 0.7, 0.05)
        t = rng.uniform(0, 3, (3, 2))
        s = run_hmc(None, SQEXP, obs, y, t, HMCConfig(n_chains=2), err=ErrorModel(ERR_NONE), theta=spec)
        ref = kale_krige(spec, ErrorModel(ERR_NONE), obs, y, t)
        np.testing.assert_allclose(s.mean, ref.mean, rtol=1e-10)
        np.testing.assert_allclose(s.pred_var, ref.mse, rtol=1e-8)
        np.testing.assert_allclose(s.interval, ref.interval, rtol=1e-8)

    def test_kappa_zero_uniform_weights(self, rng):
        obs = rng.uniform(0, 3, (4, 2))
        model = LocationPosterior(SQEXP, ErrorModel(ERR_IID, 0.2), obs, rng.standard_normal((1, 4)),
                                  {"tau2": 1.0, "beta": 0.5, "sigma2_x": 0.1})
        pos = 0.3 * rng.standard_normal((2, 50, 8))
        s = importance_reweight(model, pos, [[1.0, 1.0]], kappa=0.0)
        np.testing.assert_array_equal(s.draws["log_weights"], 0.0)
        assert s.weights_ess == 100.0
        s2 = importance_reweight(model, pos, [[1.0, 1.0]], kappa=0.5)
        assert weights_ess(s2.draws["log_weights"]) < 100.0

    def test_deterministic_and_batch_independent(self):
        obs = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        Y = np.array([[1.0, 0.5, 0.2], [-0.3, 0.1, 0.9]])
        cfg = HMCConfig(n_chains=2, n_warmup=60, n_draws=60, seed=4)
        args = (SQEXP, ErrorModel(ERR_IID, 0.1), obs)
        both = posterior_predict(*args, Y, [[0.5, 0.5]], KernelSpec(1, 1, 0.01), config=cfg, keys=[7, 8])
        again = posterior_predict(*args, Y, [[0.5, 0.5]], KernelSpec(1, 1, 0.01), config=cfg, keys=[7, 8])
        alone = posterior_predict(*args, Y[1:], [[0.5, 0.5]], KernelSpec(1, 1, 0.01), config=cfg, keys=[8])
        np.testing.assert_array_equal(both[1].mean, again[1].mean)
        np.testing.assert_array_equal(both[1].mean, alone[0].mean)

    def test_samples_parameters(self):
        obs = np.random.default_rng(0).uniform(0, 4, (10, 2))
        y = np.linalg.cholesky(base_cov(KernelSpec(1.0, 0.5, 0.05), obs)) @ \
            np.random.default_rng(1).standard_normal(10)
        s = run_hmc(PriorSpec(tau2=(0.01, 10), beta=(0.01, 3), sigma2_x=(0.001, 2)), SQEXP, obs, y,
                    [[2.0, 2.0]], HMCConfig(n_chains=2, n_warmup=200, n_draws=300, seed=2),
                    err=ErrorModel(ERR_IID, 0.05), theta={},
                    sample=("tau2", "beta", "sigma2_x"))
        assert set(s.theta_mean) == {"tau2", "beta", "sigma2_x"}
        assert 0.01 < s.theta_mean["beta"] < 3
        assert s.draws["beta"].shape == (2, 300)
