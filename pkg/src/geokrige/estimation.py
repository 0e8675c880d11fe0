"""Maximum pseudo-likelihood estimation of covariance parameters.

The pseudo-likelihood is the Gaussian likelihood with the induced
covariance ``K_theta`` of the observed process; the additive constant
``-n/2 log(2 pi)`` is dropped throughout.  ``sigma2_u`` is held fixed,
since only two of ``(tau2, beta, sigma2_u)`` are identifiable.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize
from scipy.stats import qmc

from .gp_core import SingularMatrixError, cholesky
from .kernels import DEFAULT_N_MC, SQEXP, ErrorModel, InducedGram, KernelSpec, base_cov, draw_errors

log = logging.getLogger("geokrige.diagnostics")

PARAMS = ("tau2", "beta", "sigma2_x")
# positive lower bounds stand in for the open end of the flat prior supports
TABLE1_BOX = {"tau2": (1e-6, 10.0), "beta": (0.0005, 3.0), "sigma2_x": (1e-6, 10.0)}


class FitError(RuntimeError):
    def __init__(self, message, restarts):
        super().__init__(message)
        self.restarts = restarts


@dataclass
class GodambeMatrices:
    G: np.ndarray
    H: np.ndarray
    I_godambe: np.ndarray
    params: tuple = PARAMS
    pinv_used: bool = False
    n_mc_outer: int = 0


@dataclass
class FitResult:
    theta_hat: np.ndarray
    log_pseudolik: float
    n_restarts: int
    converged: bool
    godambe: GodambeMatrices | None = None
    restarts: list = field(default_factory=list)

    @property
    def spec_kwargs(self) -> dict:
        return dict(zip(PARAMS, (float(v) for v in self.theta_hat)))


def _theta_array(theta) -> np.ndarray:
    if isinstance(theta, KernelSpec):
        return theta.theta
    return np.asarray(theta, dtype=float).reshape(3)


def _family(theta, family):
    return theta.family if isinstance(theta, KernelSpec) else family


def log_pseudolik(theta, err: ErrorModel, obs, y, n_mc: int = DEFAULT_N_MC, seed: int = 0,
                  family: str = SQEXP, gram: InducedGram | None = None) -> float:
    """``-1/2 log|K_theta| - 1/2 y' K_theta^{-1} y``; ``-inf`` if ``K_theta`` is singular."""
    val, _ = log_pseudolik_and_grad(theta, err, obs, y, n_mc, seed, family, gram, grad=False)
    return val


def log_pseudolik_and_grad(theta, err: ErrorModel, obs, y, n_mc: int = DEFAULT_N_MC, seed: int = 0,
                           family: str = SQEXP, gram: InducedGram | None = None, grad: bool = True):
    """Value and gradient with respect to ``(tau2, beta, sigma2_x)``.

    The gradient is the pseudo-score
    ``1/2 a' dK a - 1/2 tr(K^{-1} dK)`` with ``a = K^{-1} y``.
    """
    th = _theta_array(theta)
    if gram is None:
        gram = InducedGram(_family(theta, family), err, obs, n_mc=n_mc, seed=seed)
    y = np.asarray(y, dtype=float)
    K, dK = gram.matrix_and_grad(th, grad=grad)
    try:
        fac = cholesky(K, allow_jitter=False)
    except SingularMatrixError as exc:
        log.info("log_pseudolik: singular K at theta=%s (%s)", th, exc)
        return -np.inf, (np.zeros(3) if grad else None)
    a = fac.solve(y)
    val = -0.5 * fac.logdet - 0.5 * float(y @ a)
    if not grad:
        return val, None
    Kinv = fac.inverse()
    g = np.array([0.5 * a @ d @ a - 0.5 * np.sum(Kinv * d) for d in dK])
    return val, g


def pseudo_score(theta, err, obs, y, n_mc: int = DEFAULT_N_MC, seed: int = 0, family: str = SQEXP,
                 gram: InducedGram | None = None) -> np.ndarray:
    return log_pseudolik_and_grad(theta, err, obs, y, n_mc, seed, family, gram)[1]


def fit_mple(err: ErrorModel, obs, y, box: dict | None = None, n_restarts: int = 8, seed: int = 0,
             family: str = SQEXP, n_mc: int = DEFAULT_N_MC, gram: InducedGram | None = None,
             maxiter: int = 200) -> FitResult:
    """Multistart bounded quasi-Newton maximization of the pseudo-likelihood.

    Optimization runs over ``log(theta)`` inside ``box`` (default: the
    simulation-study prior supports) from Latin-hypercube starting points.
    The Monte Carlo draws behind ``K_theta`` are fixed for the whole fit.
    """
    box = {**TABLE1_BOX, **(box or {})}
    lo = np.log([box[k][0] for k in PARAMS])
    hi = np.log([box[k][1] for k in PARAMS])
    if np.any(lo >= hi):
        raise ValueError(f"empty box {box}")
    if gram is None:
        gram = InducedGram(family, err, obs, n_mc=n_mc, seed=seed)
    y = np.asarray(y, dtype=float)

    def objective(logt):
        th = np.exp(logt)
        val, g = log_pseudolik_and_grad(th, err, obs, y, family=family, gram=gram)
        if not np.isfinite(val):
            return 1e12, np.zeros(3)
        return -val, -g * th

    starts = qmc.LatinHypercube(d=3, seed=np.random.default_rng([seed, 7])).random(n_restarts)
    starts = lo + starts * (hi - lo)
    bounds = list(zip(lo, hi))
    restarts = []
    best = None
    for x0 in starts:
        try:
            res = minimize(objective, x0, jac=True, method="L-BFGS-B", bounds=bounds,
                           options={"maxiter": maxiter})
        except (FloatingPointError, ValueError) as exc:  # pragma: no cover
            restarts.append({"start": np.exp(x0).tolist(), "error": str(exc)})
            continue
        ok = bool(np.isfinite(res.fun) and res.fun < 1e12)
        restarts.append({"start": np.exp(x0).tolist(), "theta": np.exp(res.x).tolist(),
                         "value": -float(res.fun), "success": bool(res.success),
                         "message": str(res.message)})
        if ok and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise FitError("all restarts failed", restarts)
    theta_hat = np.clip(np.exp(best.x), np.exp(lo), np.exp(hi))
    return FitResult(theta_hat=theta_hat, log_pseudolik=-float(best.fun), n_restarts=n_restarts,
                     converged=bool(best.success), restarts=restarts)


def godambe(theta, err: ErrorModel, obs, n_mc_outer: int = 2000, seed: int = 0,
            family: str = SQEXP, params=PARAMS, n_mc: int = DEFAULT_N_MC,
            gram: InducedGram | None = None) -> GodambeMatrices:
    """Pseudo-score covariance ``G``, expected negative Hessian ``H`` and ``H G^{-1} H``.

    ``G`` averages over ``n_mc_outer`` draws of ``C_theta(u_n)``; within a
    draw both the trace-product term and the product-of-traces term use the
    same ``u_n``.  Without location error ``C_theta(u_n) = K_theta`` and
    ``G = H`` exactly.
    """
    th = _theta_array(theta)
    fam = _family(theta, family)
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    idx = [PARAMS.index(p) for p in params]
    if gram is None:
        gram = InducedGram(fam, err, obs, n_mc=n_mc, seed=seed)
    K, dK = gram.matrix_and_grad(th)
    dK = [dK[i] for i in idx]
    fac = cholesky(K)
    Kinv = fac.inverse()
    omegas = [Kinv @ d @ Kinv for d in dK]
    OK = [o @ K for o in omegas]
    q = len(idx)
    H = np.empty((q, q))
    t = np.array([np.trace(a) for a in OK])
    for i in range(q):
        for j in range(i, q):
            H[i, j] = H[j, i] = 0.5 * np.sum(OK[i] * OK[j].T)

    spec = KernelSpec(th[0], th[1], th[2], fam)
    if err.degenerate:
        G = H.copy()
    else:
        u = draw_errors(err, obs, n_mc_outer, seed, tag=2)
        first = np.zeros((q, q))
        prod = np.zeros((q, q))
        for b in range(n_mc_outer):
            Cu = base_cov(spec, err.displace(obs, u[b]))
            A = [o @ Cu for o in omegas]
            tr = np.array([np.trace(a) for a in A])
            for i in range(q):
                for j in range(i, q):
                    first[i, j] += 0.5 * np.sum(A[i] * A[j].T)
            prod += np.outer(tr, tr)
        first = np.triu(first) + np.triu(first, 1).T
        G = first / n_mc_outer + 0.25 * (prod / n_mc_outer - np.outer(t, t))
    G = 0.5 * (G + G.T)
    pinv_used = False
    try:
        Ginv = np.linalg.inv(G)
        if not np.all(np.isfinite(Ginv)) or np.linalg.cond(G) > 1e12:
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        log.warning("godambe: G is singular, using pseudo-inverse")
        Ginv = np.linalg.pinv(G)
        pinv_used = True
    I = H @ Ginv @ H
    return GodambeMatrices(G=G, H=H, I_godambe=0.5 * (I + I.T), params=tuple(params),
                           pinv_used=pinv_used, n_mc_outer=n_mc_outer)
