"""Hamiltonian Monte Carlo for the minimum-MSE predictor under location error.

The sampled state is the vector of location errors ``u`` (one row per
observation) and, optionally, covariance parameters mapped to an
unconstrained scale.  Given a state, the target values are Gaussian with an
exact conditional, so the predictor is the average of conditional means
(Rao-Blackwellized) and intervals come from one predictive draw per state.

Every chain of every replicate advances in lock step: the log-density and
its gradient are evaluated for a stack of states at once, which is what
makes repeated simulation affordable in numpy.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import lapack
from scipy.special import expit
from scipy.stats import norm

from .diagnostics import ess, split_rhat, weights_ess
from .gp_core import batched_cholesky_inverse, condition
from .kernels import (EARTH_RADIUS_KM, GEODESIC, SQEXP, ErrorModel, KernelSpec, _FAMILY_ALIASES,
                      base_cov, pairwise_metric)

log = logging.getLogger("geokrige.diagnostics")

THETA_NAMES = ("tau2", "beta", "sigma2_x")


@dataclass(frozen=True)
class PriorSpec:
    """Flat priors on bounded intervals for the covariance parameters.

    The location-error prior is the measurement error model itself.
    ``sigma2_u`` is listed for completeness but is always held fixed.
    """

    tau2: tuple = (0.0, 10.0)
    beta: tuple = (0.0005, 3.0)
    sigma2_x: tuple = (0.0, 10.0)
    sigma2_u: tuple = (0.0, 10.0)

    def bounds(self, name: str) -> tuple[float, float]:
        lo, hi = getattr(self, name)
        if not hi > lo:
            raise ValueError(f"empty prior support for {name}: {(lo, hi)}")
        return float(lo), float(hi)

    def contains(self, theta: dict) -> bool:
        return all(self.bounds(k)[0] < v < self.bounds(k)[1] for k, v in theta.items())


@dataclass
class HMCConfig:
    n_chains: int = 4
    n_warmup: int = 1000
    n_draws: int = 2000
    n_leapfrog: int = 16
    dense_mass: bool = False
    target_accept: float = 0.8
    max_energy_error: float = 1000.0
    init_scale: float = 2.0
    step_jitter: float = 0.2  # step size drawn from eps * U(1 - j, 1 + j) each iteration
    kappa: float = 0.0
    alpha: float = 0.05
    seed: int = 0


@dataclass
class ChainState:
    """Natural-scale view of one sampler position."""

    u: np.ndarray
    theta: dict


@dataclass
class PosteriorSummary:
    mean: np.ndarray
    interval: np.ndarray
    mean_raw: np.ndarray
    pred_var: np.ndarray
    rhat: dict
    ess: dict
    max_rhat: float
    min_ess: float
    acceptance_rate: float
    divergences: int
    step_size: np.ndarray
    n_draws: int
    warnings: list = field(default_factory=list)
    weights_ess: float | None = None
    theta_mean: dict = field(default_factory=dict)
    draws: dict | None = None


# ----------------------------------------------------------------------
# log posterior


class LocationPosterior:
    """Batched log posterior of ``(u, theta)`` given the observed values.

    Parameters
    ----------
    family : str
        Base kernel family.
    err : ErrorModel
        Location error model, used as the prior on ``u``.
    obs : (n, p) array
        Nominal observation sites.
    y : (B, n) array
        Observed values, one row per batch entry (chain).
    theta : KernelSpec or dict
        Values of the covariance parameters that are not sampled; scalars or
        arrays of shape (B,).
    sample : sequence of str
        Covariance parameters sampled under flat priors from ``prior``.
    kappa : float
        Extra nugget added to the likelihood covariance (tempering for
        importance reweighting).
    """

    def __init__(self, family, err: ErrorModel, obs, y, theta, sample=(),
                 prior: PriorSpec | None = None, kappa: float = 0.0):
        self.family = _FAMILY_ALIASES.get(family, family)
        if self.family not in (SQEXP, GEODESIC):
            raise ValueError(f"unknown family {family!r}")
        self.err = err
        self.obs = np.atleast_2d(np.asarray(obs, dtype=float))
        self.n, self.p = self.obs.shape
        self.y = np.atleast_2d(np.asarray(y, dtype=float))
        self.B = self.y.shape[0]
        if isinstance(theta, KernelSpec):
            theta = dict(zip(THETA_NAMES, theta.theta))
        self.fixed = {k: np.broadcast_to(np.asarray(theta[k], dtype=float), (self.B,))
                      for k in THETA_NAMES if k not in sample}
        self.sample = tuple(sample)
        for k in self.sample:
            if k not in THETA_NAMES:
                raise ValueError(f"cannot sample {k!r}")
        self.prior = prior or PriorSpec()
        self.lo = np.array([self.prior.bounds(k)[0] for k in self.sample])
        self.hi = np.array([self.prior.bounds(k)[1] for k in self.sample])
        self.kappa = float(kappa)
        self.u_var = err.point_variances(self.obs)  # (n, p)
        self.nu = 0 if err.degenerate else self.n * self.p
        self.dim = self.nu + len(self.sample)
        self.eye = np.eye(self.n)

    # -- parametrization
    def theta_of(self, q) -> dict:
        q = np.atleast_2d(q)
        th = {k: v for k, v in self.fixed.items()}
        if self.sample:
            s = expit(q[:, self.nu:])
            vals = self.lo + (self.hi - self.lo) * s
            for j, k in enumerate(self.sample):
                th[k] = vals[:, j]
        return th

    def eta_of(self, theta: dict) -> np.ndarray:
        out = []
        for j, k in enumerate(self.sample):
            f = (np.asarray(theta[k], dtype=float) - self.lo[j]) / (self.hi[j] - self.lo[j])
            out.append(np.log(f) - np.log1p(-f))
        return np.stack(out, axis=-1) if out else np.zeros((self.B, 0))

    def sites(self, q) -> np.ndarray:
        q = np.atleast_2d(q)
        if self.nu == 0:
            return np.broadcast_to(self.obs, (q.shape[0], self.n, self.p))
        return self.obs + q[:, :self.nu].reshape(-1, self.n, self.p)

    def state(self, q) -> list[ChainState]:
        th = self.theta_of(q)
        z = self.sites(q)
        u = z - self.obs
        return [ChainState(u[b], {k: float(v[b]) for k, v in th.items()}) for b in range(z.shape[0])]

    def initial_inv_mass(self) -> np.ndarray:
        return np.concatenate([self.u_var.ravel()[: self.nu], np.ones(len(self.sample))])

    # -- covariance pieces
    def _metric(self, z, t=None):
        if self.family != SQEXP:
            return pairwise_metric(self.family, z, z if t is None else t)
        # expanded form, one matmul instead of an (n, n, p) difference array
        if t is None:
            sq = np.einsum("bik,bik->bi", z, z)
            d = sq[:, :, None] + sq[:, None, :] - 2.0 * (z @ np.swapaxes(z, 1, 2))
            idx = np.arange(z.shape[1])
            d[:, idx, idx] = 0.0
        else:
            d = (np.einsum("bik,bik->bi", z, z)[:, :, None] + np.sum(t * t, axis=1)[None, None, :]
                 - 2.0 * (z @ t.T))
        return np.maximum(d, 0.0)

    def _cov(self, z, th):
        M = self._metric(z)
        C0 = th["tau2"][:, None, None] * np.exp(-th["beta"][:, None, None] * M)
        return M, C0

    def _site_grad(self, z, beta, W, C0):
        """Gradient of the Gaussian log likelihood with respect to sites."""
        G = W * C0
        if self.family == SQEXP:
            return -2.0 * beta[:, None, None] * (G.sum(axis=2)[..., None] * z - G @ z)
        lon = np.deg2rad(z[..., 0])
        lat = np.deg2rad(z[..., 1])
        cl, sl = np.cos(lat), np.sin(lat)
        co, so = np.cos(lon), np.sin(lon)
        X = np.stack([cl * co, cl * so, sl], axis=-1)
        h = (np.sin(0.5 * (lat[:, None, :] - lat[:, :, None])) ** 2
             + cl[:, :, None] * cl[:, None, :] * np.sin(0.5 * (lon[:, None, :] - lon[:, :, None])) ** 2)
        with np.errstate(divide="ignore", invalid="ignore"):
            dd = EARTH_RADIUS_KM / np.sqrt(h * (1.0 - h))
        dd = np.where(h > 1e-300, dd, 0.0)
        dd = np.where(np.isfinite(dd), dd, 0.0)
        E = -beta[:, None, None] * G * dd
        EX = E @ X  # (B, n, 3)
        d_lon = np.stack([-cl * so, cl * co, np.zeros_like(cl)], axis=-1)
        d_lat = np.stack([-sl * co, -sl * so, cl], axis=-1)
        g_lon = -0.5 * np.sum(d_lon * EX, axis=-1)
        g_lat = -0.5 * np.sum(d_lat * EX, axis=-1)
        return np.deg2rad(1.0) * np.stack([g_lon, g_lat], axis=-1)

    def __call__(self, q):
        return self.logp_grad(q)

    def logp_grad(self, q):
        """Log density (up to a constant) and its gradient for a stack of positions."""
        q = np.atleast_2d(np.asarray(q, dtype=float))
        B = q.shape[0]
        if B != self.B:
            raise ValueError(f"expected {self.B} positions, got {B}")
        th = self.theta_of(q)
        z = self.sites(q)
        M, C0 = self._cov(z, th)
        C = C0 + (th["sigma2_x"] + self.kappa)[:, None, None] * self.eye
        inv, logdet, ok = batched_cholesky_inverse(C)
        y = self.y
        alpha = np.einsum("bij,bj->bi", inv, y)
        lp = -0.5 * logdet - 0.5 * np.sum(y * alpha, axis=1)
        W = alpha[:, :, None] * alpha[:, None, :] - inv
        grad = np.zeros_like(q)
        if self.nu:
            u = q[:, :self.nu]
            var = self.u_var.ravel()
            lp = lp - 0.5 * np.sum(u * u / var, axis=1)
            gz = self._site_grad(z, th["beta"], W, C0)
            grad[:, :self.nu] = gz.reshape(B, -1) - u / var
        if self.sample:
            eta = q[:, self.nu:]
            s = expit(eta)
            a = np.abs(eta)
            lp = lp - np.sum(a + 2.0 * np.log1p(np.exp(-a)), axis=1)
            dth = (self.hi - self.lo) * s * (1.0 - s)
            for j, k in enumerate(self.sample):
                if k == "tau2":
                    g = 0.5 * np.sum(W * C0, axis=(1, 2)) / th["tau2"]
                elif k == "beta":
                    g = -0.5 * np.sum(W * M * C0, axis=(1, 2))
                else:
                    g = 0.5 * np.trace(W, axis1=1, axis2=2)
                grad[:, self.nu + j] = g * dth[:, j] + (1.0 - 2.0 * s[:, j])
        bad = ~ok | ~np.isfinite(lp)
        if np.any(bad):
            lp = np.where(bad, -np.inf, lp)
            grad[bad] = 0.0
        return lp, grad

    def conditional(self, q, targets, with_loglik: bool = False):
        """Exact conditional mean and variance of the smooth process at targets.

        With ``with_loglik`` also returns ``log N(y; 0, C)`` and
        ``log N(y; 0, C + kappa I)`` (without the ``2 pi`` constant),
        both from one eigendecomposition of ``C``.
        """
        q = np.atleast_2d(np.asarray(q, dtype=float))
        th = self.theta_of(q)
        z = self.sites(q)
        targets = np.asarray(targets, dtype=float)
        B = z.shape[0]
        M, C0 = self._cov(z, th)
        C = C0 + th["sigma2_x"][:, None, None] * self.eye
        cs = th["tau2"][:, None, None] * np.exp(-th["beta"][:, None, None] * self._metric(z, targets))
        mean = np.full((B, targets.shape[0]), np.nan)
        var = np.full((B, targets.shape[0]), np.nan)
        if with_loglik:
            lam, Q = np.linalg.eigh(C)
            lam = np.maximum(lam, 1e-300)
            qy = np.einsum("bji,bj->bi", Q, self.y)
            qc = np.einsum("bji,bjk->bik", Q, cs)
            mean = np.einsum("bik,bi->bk", qc, qy / lam)
            var = th["tau2"][:, None] - np.einsum("bik,bi->bk", qc * qc, 1.0 / lam)
            ll = -0.5 * np.sum(np.log(lam), axis=1) - 0.5 * np.sum(qy * qy / lam, axis=1)
            lk = lam + self.kappa
            llk = -0.5 * np.sum(np.log(lk), axis=1) - 0.5 * np.sum(qy * qy / lk, axis=1)
            return mean, np.clip(var, 0.0, None), ll, llk
        for b in range(B):
            c, info = lapack.dpotrf(C[b], lower=1, clean=1)
            if info != 0:
                continue
            rhs = np.column_stack([self.y[b], cs[b]])
            x, _ = lapack.dpotrs(c, rhs, lower=1)
            mean[b] = cs[b].T @ x[:, 0]
            var[b] = th["tau2"][b] - np.sum(cs[b] * x[:, 1:], axis=0)
        return mean, np.clip(var, 0.0, None)


def log_posterior_and_grad(state: ChainState, prior: PriorSpec, family, err: ErrorModel, obs, y,
                           sample=()) -> tuple[float, np.ndarray]:
    """Single-state convenience wrapper around :class:`LocationPosterior`.

    Returns ``-inf`` if a sampled parameter lies outside its prior support.
    The gradient is with respect to the unconstrained position used by the
    sampler.
    """
    theta = dict(state.theta)
    if sample and not prior.contains({k: theta[k] for k in sample}):
        return -np.inf, None
    model = LocationPosterior(family, err, obs, np.atleast_2d(y), theta, sample, prior)
    q = np.concatenate([np.ravel(state.u)[: model.nu], model.eta_of(theta).ravel()])[None]
    lp, g = model.logp_grad(q)
    return float(lp[0]), g[0]


# ----------------------------------------------------------------------
# sampler engine


class _DualAveraging:
    def __init__(self, eps, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa
        self.restart(eps)

    def restart(self, eps):
        self.mu = np.log(10.0 * eps)
        self.hbar = np.zeros_like(eps)
        self.log_eps = np.log(eps)
        self.log_eps_bar = np.zeros_like(eps)
        self.t = 0

    def update(self, accept):
        self.t += 1
        w = 1.0 / (self.t + self.t0)
        self.hbar = (1.0 - w) * self.hbar + w * (self.target - accept)
        self.log_eps = self.mu - np.sqrt(self.t) / self.gamma * self.hbar
        k = self.t ** (-self.kappa)
        self.log_eps_bar = k * self.log_eps + (1.0 - k) * self.log_eps_bar
        return np.exp(self.log_eps)

    @property
    def final(self):
        return np.exp(self.log_eps_bar)


class _Metric:
    """Inverse mass matrix per chain, diagonal (B, D) or dense (B, D, D)."""

    def __init__(self, inv_mass):
        self.inv_mass = np.asarray(inv_mass, dtype=float)
        self.dense = self.inv_mass.ndim == 3
        if self.dense:
            chol = np.linalg.cholesky(self.inv_mass)
            # p = L^{-T} xi has covariance (L L^T)^{-1} = mass
            self.mom = np.swapaxes(np.linalg.inv(chol), 1, 2)
        else:
            self.mom = 1.0 / np.sqrt(self.inv_mass)

    def velocity(self, p):
        if self.dense:
            return np.einsum("bij,bj->bi", self.inv_mass, p)
        return self.inv_mass * p

    def momentum(self, rngs):
        xi = np.stack([r.standard_normal(self.inv_mass.shape[1]) for r in rngs])
        if self.dense:
            return np.einsum("bij,bj->bi", self.mom, xi)
        return xi * self.mom

    def kinetic(self, p):
        return 0.5 * np.sum(p * self.velocity(p), axis=1)


def _leapfrog(model, q, p, lp, g, eps, metric, L):
    e = eps[:, None]
    p = p + 0.5 * e * g
    for step in range(L):
        q = q + e * metric.velocity(p)
        lp, g = model(q)
        if step < L - 1:
            p = p + e * g
    p = p + 0.5 * e * g
    return q, p, lp, g


def _energy(lp, p, metric):
    return -lp + metric.kinetic(p)


def _initial_step(model, q, lp, g, metric, rngs):
    B = q.shape[0]
    eps = np.ones(B)
    direction = None
    for _ in range(60):
        p = metric.momentum(rngs)
        h0 = _energy(lp, p, metric)
        _, p1, lp1, _ = _leapfrog(model, q, p, lp, g, eps, metric, 1)
        dh = h0 - _energy(lp1, p1, metric)
        dh = np.where(np.isfinite(dh), dh, -np.inf)
        up = dh > np.log(0.5)
        if direction is None:
            direction = np.where(up, 1.0, -1.0)
        done = np.where(direction > 0, ~up, up)
        if np.all(done):
            break
        eps = np.where(done, eps, eps * 2.0 ** direction)
        eps = np.clip(eps, 1e-8, 1e3)
    return eps


def _adapted_metric(s1, s2, n, base, dense):
    """Window covariance shrunk towards a small multiple of the starting metric."""
    shrink = n / (n + 5.0)
    mean = s1 / n
    if dense:
        cov = (s2 - n * mean[:, :, None] * mean[:, None, :]) / (n - 1)
        reg = (1.0 - shrink) * 1e-3 * base
        return _Metric(shrink * cov + reg[:, :, None] * np.eye(base.shape[1]))
    var = (s2 - n * mean * mean) / (n - 1)
    return _Metric(shrink * np.maximum(var, 0.0) + (1.0 - shrink) * 1e-3 * base)


def hmc_batch(model, q0, rngs, config: HMCConfig, on_draw=None):
    """Run lock-step HMC for ``B`` independent chains.

    Adaptation: dual-averaging step size throughout warmup and a diagonal
    inverse mass estimated from the middle warmup window, after which the
    step size adaptation restarts.  Returns per-chain statistics and the
    log-density trace of the retained draws.
    """
    q = np.array(q0, dtype=float)
    B, D = q.shape
    base = np.tile(model.initial_inv_mass(), (B, 1))
    metric = _Metric(base)
    dense = config.dense_mass and D > 1
    lp, g = model(q)
    if not np.all(np.isfinite(lp)):
        raise FloatingPointError("initial positions have zero posterior density")
    W = config.n_warmup
    start_collect, stop_collect = int(0.5 * W), int(0.85 * W)
    eps = _initial_step(model, q, lp, g, metric, rngs)
    da = _DualAveraging(eps, config.target_accept)
    s1 = np.zeros((B, D))
    s2 = np.zeros((B, D, D)) if dense else np.zeros((B, D))
    ncol = 0
    acc_sum = np.zeros(B)
    div = np.zeros(B, dtype=int)
    lp_trace = np.empty((B, config.n_draws))
    for it in range(W + config.n_draws):
        warm = it < W
        if it == W:
            eps = da.final
        if warm and it == stop_collect and ncol > 2:
            metric = _adapted_metric(s1, s2, ncol, base, dense)
            eps = _initial_step(model, q, lp, g, metric, rngs)
            da.restart(eps)
        p = metric.momentum(rngs)
        h0 = _energy(lp, p, metric)
        step = eps
        if config.step_jitter > 0:
            # breaks resonances between eps * L and periods of the target
            j = config.step_jitter
            step = eps * np.array([r.uniform(1.0 - j, 1.0 + j) for r in rngs])
        q1, p1, lp1, g1 = _leapfrog(model, q, p, lp, g, step, metric, config.n_leapfrog)
        dh = _energy(lp1, p1, metric) - h0
        dh = np.where(np.isfinite(dh), dh, np.inf)
        divergent = dh > config.max_energy_error
        a = np.where(divergent, 0.0, np.exp(-np.clip(dh, 0.0, 700.0)))
        draw = np.array([r.random() for r in rngs])
        take = (draw < a) & ~divergent
        q = np.where(take[:, None], q1, q)
        lp = np.where(take, lp1, lp)
        g = np.where(take[:, None], g1, g)
        if warm:
            eps = da.update(a)
            if start_collect <= it < stop_collect:
                s1 += q
                s2 += q[:, :, None] * q[:, None, :] if dense else q * q
                ncol += 1
        else:
            k = it - W
            acc_sum += a
            div += divergent
            lp_trace[:, k] = lp
            if on_draw is not None:
                on_draw(k, q)
    return {"accept": acc_sum / max(1, config.n_draws), "divergences": div, "step_size": eps,
            "inv_mass": metric.inv_mass, "lp": lp_trace, "last": q}


# ----------------------------------------------------------------------
# predictive summaries


def _weighted_quantile(x, w, probs):
    order = np.argsort(x)
    xs, ws = x[order], w[order]
    cw = np.cumsum(ws) - 0.5 * ws
    cw /= ws.sum()
    return np.interp(probs, cw, xs)


def _summarize(pred, cmean, cvar, traces, alpha, log_w=None, extra=None, n_chains=1):
    """Combine retained draws (chains, draws, ...) into a summary."""
    C, N, m = pred.shape
    flat_pred = pred.reshape(-1, m)
    flat_mean = cmean.reshape(-1, m)
    flat_var = cvar.reshape(-1, m)
    warnings = []
    wess = None
    uniform = log_w is None or np.all(log_w == log_w.flat[0])
    probs = [alpha / 2, 1 - alpha / 2]
    if uniform:
        mean = flat_mean.mean(axis=0)
        mean_raw = flat_pred.mean(axis=0)
        ev = flat_var.mean(axis=0)
        vm = flat_mean.var(axis=0)
        interval = np.quantile(flat_pred, probs, axis=0).T
        if log_w is not None:
            wess = float(log_w.size)
    else:
        lw = log_w.ravel()
        w = np.exp(lw - lw.max())
        w /= w.sum()
        wess = weights_ess(lw)
        if wess < 0.05 * lw.size:
            warnings.append(f"importance weights degenerate: ESS {wess:.1f} of {lw.size}")
        mean = w @ flat_mean
        mean_raw = w @ flat_pred
        ev = w @ flat_var
        vm = w @ (flat_mean - mean) ** 2
        interval = np.array([_weighted_quantile(flat_pred[:, j], w, probs) for j in range(m)])
    rhat = {}
    ess_d = {}
    for name, tr in traces.items():
        tr = np.asarray(tr)
        if tr.ndim == 2:
            tr = tr[..., None]
        if C > 1 or tr.shape[1] >= 4:
            rhat[name] = split_rhat(tr)
            ess_d[name] = ess(tr)
    max_rhat = max((float(np.nanmax(v)) for v in rhat.values() if v.size), default=1.0)
    min_ess = min((float(np.nanmin(v)) for v in ess_d.values() if v.size), default=float(C * N))
    if max_rhat > 1.1:
        warnings.append(f"chains have not mixed: max split R-hat {max_rhat:.3f}")
    return dict(mean=mean, interval=interval, mean_raw=mean_raw, pred_var=ev + vm,
                rhat=rhat, ess=ess_d, max_rhat=max_rhat, min_ess=min_ess,
                warnings=warnings, weights_ess=wess)


def _rep_rngs(seed, keys, n_chains):
    return [np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(int(k), c)))
            for k in keys for c in range(n_chains)]


def posterior_predict(family, err: ErrorModel, obs, Y, targets, theta, prior: PriorSpec | None = None,
                      sample=(), config: HMCConfig | None = None, keys=None, keep_draws: bool = False,
                      init=None):
    """Posterior predictive summaries for several datasets sharing one design.

    ``Y`` is (R, n).  All ``R * n_chains`` chains run in one lock-step
    batch; chain ``c`` of dataset ``r`` draws from its own generator keyed
    on ``(seed, keys[r], c)``.  Chains start from overdispersed draws of
    the error model unless ``init`` (R, dim) gives a starting position per
    dataset.  Returns a list of :class:`PosteriorSummary`.
    """
    config = config or HMCConfig()
    prior = prior or PriorSpec()
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    R, n = Y.shape
    m = targets.shape[0]
    nc = config.n_chains
    keys = np.arange(R) if keys is None else np.asarray(keys)
    if isinstance(theta, KernelSpec):
        theta = dict(zip(THETA_NAMES, theta.theta))
    theta = {k: np.repeat(np.broadcast_to(np.asarray(v, dtype=float), (R,)), nc)
             for k, v in theta.items() if k not in sample}
    model = LocationPosterior(family, err, obs, np.repeat(Y, nc, axis=0), theta, sample, prior,
                              kappa=config.kappa)
    rngs = _rep_rngs(config.seed, keys, nc)
    B = R * nc

    if model.dim == 0:
        return _exact_summaries(model, targets, rngs, config, R, nc)

    q0 = np.empty((B, model.dim))
    sd = np.sqrt(model.u_var.ravel())
    for b, r in enumerate(rngs):
        q0[b, :model.nu] = config.init_scale * sd[:model.nu] * r.standard_normal(model.nu)
        q0[b, model.nu:] = r.uniform(-2.0, 2.0, len(model.sample))
    if init is not None:
        q0 = np.repeat(np.asarray(init, dtype=float).reshape(R, model.dim), nc, axis=0)
    # overdispersed starts can land on a zero-density state; pull them in
    lp0, _ = model(q0)
    for _ in range(20):
        bad = ~np.isfinite(lp0)
        if not bad.any():
            break
        q0[bad] *= 0.5
        lp0, _ = model(q0)

    N = config.n_draws
    pred = np.empty((B, N, m))
    cmean = np.empty((B, N, m))
    cvar = np.empty((B, N, m))
    thetas = np.empty((B, N, len(model.sample)))
    log_w = np.zeros((B, N)) if config.kappa > 0 else None
    pos = np.empty((B, N, model.dim)) if keep_draws else None

    def record(k, q):
        if config.kappa > 0:
            mu, v, ll, llk = model.conditional(q, targets, with_loglik=True)
            log_w[:, k] = ll - llk
        else:
            mu, v = model.conditional(q, targets)
        xi = np.stack([r.standard_normal(m) for r in rngs])
        cmean[:, k] = mu
        cvar[:, k] = v
        pred[:, k] = mu + np.sqrt(v) * xi
        if model.sample:
            th = model.theta_of(q)
            thetas[:, k] = np.column_stack([th[s] for s in model.sample])
        if keep_draws:
            pos[:, k] = q

    stats = hmc_batch(model, q0, rngs, config, on_draw=record)

    out = []
    for r in range(R):
        sl = slice(r * nc, (r + 1) * nc)
        traces = {"cond_mean": cmean[sl], "lp": stats["lp"][sl]}
        for j, s in enumerate(model.sample):
            traces[s] = thetas[sl, :, j]
        if keep_draws:
            traces["position"] = pos[sl]
        sm = _summarize(pred[sl], cmean[sl], cvar[sl], traces, config.alpha,
                        None if log_w is None else log_w[sl], n_chains=nc)
        ndiv = int(stats["divergences"][sl].sum())
        if ndiv:
            sm["warnings"].append(f"{ndiv} divergent transitions")
        draws = None
        if keep_draws:
            draws = {"position": pos[sl], "pred": pred[sl], "cond_mean": cmean[sl],
                     "cond_var": cvar[sl], "log_weights": None if log_w is None else log_w[sl]}
            for j, s in enumerate(model.sample):
                draws[s] = thetas[sl, :, j]
        theta_mean = {s: float(thetas[sl, :, j].mean()) for j, s in enumerate(model.sample)}
        out.append(PosteriorSummary(
            acceptance_rate=float(stats["accept"][sl].mean()), divergences=ndiv,
            step_size=stats["step_size"][sl], n_draws=nc * N, theta_mean=theta_mean,
            draws=draws, **sm))
        for w in sm["warnings"]:
            log.warning("posterior %d: %s", int(keys[r]), w)
    return out


def _exact_summaries(model, targets, rngs, config, R, nc):
    """No location error and known parameters: the conditional is exact."""
    q = np.zeros((R * nc, 0))
    mu, v = model.conditional(q, targets)
    z = norm.ppf(1.0 - config.alpha / 2.0)
    out = []
    for r in range(R):
        b = r * nc
        iv = np.column_stack([mu[b] - z * np.sqrt(v[b]), mu[b] + z * np.sqrt(v[b])])
        out.append(PosteriorSummary(
            mean=mu[b], interval=iv, mean_raw=mu[b], pred_var=v[b], rhat={}, ess={},
            max_rhat=1.0, min_ess=float("inf"), acceptance_rate=1.0, divergences=0,
            step_size=np.zeros(nc), n_draws=0))
    return out


def run_hmc(prior: PriorSpec | None, family, obs, y, targets, config: HMCConfig | None = None, *,
            err: ErrorModel, theta, sample=(), keep_draws: bool = True) -> PosteriorSummary:
    """Posterior predictive summary at ``targets`` for a single dataset.

    With ``config.kappa > 0`` the chains target the likelihood with an extra
    nugget ``kappa`` and the summary is importance reweighted back to the
    original posterior.
    """
    return posterior_predict(family, err, obs, np.atleast_2d(y), targets, theta, prior, sample,
                             config, keys=[0], keep_draws=keep_draws)[0]


def importance_reweight(model: LocationPosterior, positions, targets, kappa: float,
                        alpha: float = 0.05, rng=None) -> PosteriorSummary:
    """Reweight draws targeting the ``kappa``-inflated posterior.

    ``positions`` has shape (n_chains, n_draws, dim).  Weights are
    ``N(y; 0, C) / N(y; 0, C + kappa I)`` per draw, self-normalized; both
    densities share one eigendecomposition of ``C``.
    """
    positions = np.asarray(positions, dtype=float)
    nc, N, D = positions.shape
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    m = targets.shape[0]
    rng = rng or np.random.default_rng(0)
    flat = positions.reshape(-1, D)
    sub = LocationPosterior(model.family, model.err, model.obs,
                            np.repeat(model.y[:1], flat.shape[0], axis=0),
                            {k: v[0] for k, v in model.fixed.items()}, model.sample, model.prior,
                            kappa=kappa)
    mu, v, ll, llk = sub.conditional(flat, targets, with_loglik=True)
    lw = (ll - llk).reshape(nc, N)
    pred = mu + np.sqrt(v) * rng.standard_normal(mu.shape)
    sm = _summarize(pred.reshape(nc, N, m), mu.reshape(nc, N, m), v.reshape(nc, N, m),
                    {"cond_mean": mu.reshape(nc, N, m)}, alpha, lw, n_chains=nc)
    return PosteriorSummary(acceptance_rate=float("nan"), divergences=0, step_size=np.zeros(nc),
                            n_draws=nc * N,
                            draws={"log_weights": lw, "pred": pred.reshape(nc, N, m)}, **sm)


def exact_conditional(spec: KernelSpec, obs, y, targets):
    """Smooth-process conditional given exactly known sites."""
    smooth = KernelSpec(spec.tau2, spec.beta, 0.0, spec.family)
    return condition(base_cov(smooth, targets), base_cov(spec, targets, obs), base_cov(spec, obs), y)
