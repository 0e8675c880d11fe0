"""Simple Kriging with and without adjustment for location error.

KALE Kriges the observed process ``y`` with its induced covariance ``k``;
KILE plugs the error-free covariance ``c`` into the usual equations.  Both
report the exact MSE for predicting the nugget-free ``x(s*)`` under the
true (induced) second moments.  KALE intervals come from the exact error
distribution, a scale mixture of normals over the location errors.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr, ndtri

from .gp_core import cholesky
from .kernels import (
    DEFAULT_N_MC,
    CovMatrices,
    ErrorModel,
    KernelSpec,
    build_cov_matrices,
    draw_errors,
    pairwise_metric,
)

log = logging.getLogger("geokrige.diagnostics")

DEFAULT_CDF_DRAWS = 2000
DEFAULT_ZGRID = 513
NEG_VAR_TOL = 1e-10


class GridRangeError(ValueError):
    """The z grid does not bracket the requested quantiles."""


@dataclass
class KrigingResult:
    method: str
    weights: np.ndarray  # (n, m)
    mean: np.ndarray
    mse: np.ndarray
    naive_var: np.ndarray | None = None  # variance the method itself believes
    interval: np.ndarray | None = None  # (m, 2)


@dataclass
class ErrorCdf:
    """Monte Carlo CDF of ``x(s*) - xhat_KALE(s*)`` on an ascending grid."""

    z: np.ndarray
    cdf: np.ndarray
    n_mc: int
    seed: int
    variances: np.ndarray  # sampled V(u_n), one per draw


def kale_predict(cov: CovMatrices, y) -> KrigingResult:
    """KALE point prediction ``K*' K^{-1} y`` and its MSE ``c** - K*' K^{-1} K*``."""
    y = np.asarray(y, dtype=float)
    fac = cholesky(cov.K)
    gamma = fac.solve(cov.Kstar)
    mean = gamma.T @ y
    mse = cov.c_star_star - np.einsum("ij,ij->j", cov.Kstar, gamma)
    mse = np.clip(mse, 0.0, None)
    return KrigingResult("KALE", gamma, mean, mse, naive_var=mse.copy())


def kile_predict(cov: CovMatrices, y) -> KrigingResult:
    """KILE point prediction ``C*' C^{-1} y``.

    ``mse`` is the true MSE under location error,
    ``V - 2 C*'C^{-1}K* + C*'C^{-1} K C^{-1} C*``; ``naive_var`` is the
    Kriging variance an analyst ignoring the errors would report.
    """
    y = np.asarray(y, dtype=float)
    fac = cholesky(cov.C)
    gamma = fac.solve(cov.Cstar)
    mean = gamma.T @ y
    mse = (cov.c_star_star
           - 2.0 * np.einsum("ij,ij->j", gamma, cov.Kstar)
           + np.einsum("ij,ij->j", gamma, cov.K @ gamma))
    naive = cov.c_star_star - np.einsum("ij,ij->j", cov.Cstar, gamma)
    return KrigingResult("KILE", gamma, mean, np.clip(mse, 0.0, None),
                         naive_var=np.clip(naive, 0.0, None))


def normal_interval(mean, var, alpha: float = 0.05) -> np.ndarray:
    half = ndtri(1.0 - alpha / 2.0) * np.sqrt(np.asarray(var, dtype=float))
    mean = np.asarray(mean, dtype=float)
    return np.column_stack([mean - half, mean + half])


def kile_interval(result: KrigingResult, alpha: float = 0.05) -> np.ndarray:
    """Normal interval from the KILE analyst's own Kriging variance."""
    return normal_interval(result.mean, result.naive_var, alpha)


def error_variances(spec: KernelSpec, err: ErrorModel, obs, targets, gamma,
                    n_mc: int = DEFAULT_CDF_DRAWS, seed: int = 0) -> np.ndarray:
    """Draws of ``V(u_n)`` for each target, shape (n_mc, m).

    ``V(u) = tau2 + g' C(s+u, s+u) g - 2 g' c(s+u, s*)`` with KALE weights
    ``g``; the same error draws serve every target.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    gamma = np.asarray(gamma, dtype=float).reshape(obs.shape[0], targets.shape[0])
    u = draw_errors(err, obs, n_mc, seed, tag=1)
    out = np.empty((n_mc, targets.shape[0]))
    chunk = max(1, 1_000_000 // max(1, obs.shape[0] ** 2))
    for start in range(0, n_mc, chunk):
        z = err.displace(obs[None], u[start:start + chunk])
        cz = spec.tau2 * np.exp(-spec.beta * pairwise_metric(spec.family, z, z))
        idx = np.arange(obs.shape[0])
        cz[:, idx, idx] = spec.tau2 + spec.sigma2_x
        cs = spec.tau2 * np.exp(-spec.beta * pairwise_metric(spec.family, z, targets))
        quad = np.einsum("im,bij,jm->bm", gamma, cz, gamma, optimize=True)
        lin = np.einsum("im,bim->bm", gamma, cs)
        out[start:start + chunk] = spec.tau2 + quad - 2.0 * lin
    bad = out < 0.0
    if np.any(bad):
        worst = out.min()
        if worst < -NEG_VAR_TOL * spec.tau2:
            b, j = np.unravel_index(np.argmin(out), out.shape)
            raise FloatingPointError(
                f"negative error variance {worst:.3e} at draw {b}, target {j}")
        log.warning("clamping %d slightly negative error variances (min %.2e)",
                    int(bad.sum()), worst)
        out = np.clip(out, 0.0, None)
    return out


def _mixture_cdf(z, variances):
    sd = np.sqrt(variances)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(sd[None, :] > 0, z[:, None] / sd[None, :], np.sign(z)[:, None] * np.inf)
    vals = ndtr(r)
    # V = 0 components are a point mass at 0: CDF 1/2 at z = 0 by symmetry
    vals = np.where(np.isnan(r), 0.5, vals)
    return vals.mean(axis=1)


def kale_error_cdfs(spec: KernelSpec, err: ErrorModel, obs, targets,
                    n_mc: int = DEFAULT_CDF_DRAWS, seed: int = 0, zgrid=None,
                    n_z: int = DEFAULT_ZGRID, cov: CovMatrices | None = None) -> list[ErrorCdf]:
    """Error CDFs for every target, sharing one set of error draws."""
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if cov is None:
        cov = build_cov_matrices(spec, err, obs, targets, seed=seed)
    gamma = cholesky(cov.K).solve(cov.Kstar)
    V = error_variances(spec, err, obs, targets, gamma, n_mc=n_mc, seed=seed)
    out = []
    for j in range(targets.shape[0]):
        if zgrid is None:
            half = 8.0 * np.sqrt(max(V[:, j].max(), 0.0))
            z = np.linspace(-half, half, n_z) if half > 0 else np.array([-1.0, 0.0, 1.0])
        else:
            z = np.sort(np.asarray(zgrid, dtype=float))
        out.append(ErrorCdf(z, _mixture_cdf(z, V[:, j]), n_mc, seed, V[:, j].copy()))
    return out


def kale_error_cdf(spec: KernelSpec, err: ErrorModel, obs, target,
                   n_mc: int = DEFAULT_CDF_DRAWS, seed: int = 0, zgrid=None) -> ErrorCdf:
    """Exact (up to Monte Carlo) CDF of the KALE prediction error at one target.

    ``F(z) = mean_b Phi(z / sqrt(V(u_b)))``; using the same draws for every
    ``z`` keeps the estimate non-decreasing.
    """
    target = np.asarray(target, dtype=float).reshape(1, -1)
    return kale_error_cdfs(spec, err, obs, target, n_mc=n_mc, seed=seed, zgrid=zgrid)[0]


def kale_interval(cdf: ErrorCdf, mean: float, alpha: float = 0.05) -> tuple[float, float]:
    """Invert an :class:`ErrorCdf` into an interval for ``x(s*)``.

    Quantiles are read off the grid by linear interpolation.  If the error
    variance does not depend on the location errors (e.g. no error) the CDF
    is exactly normal and the normal quantile is used directly.
    """
    lo_p, hi_p = alpha / 2.0, 1.0 - alpha / 2.0
    V = cdf.variances
    if V.size and np.ptp(V) == 0.0:
        half = ndtri(hi_p) * np.sqrt(V[0])
        return float(mean - half), float(mean + half)
    F = cdf.cdf
    if F[0] > lo_p or F[-1] < hi_p:
        raise GridRangeError(
            f"z grid covers F in [{F[0]:.4g}, {F[-1]:.4g}] but needs "
            f"[{lo_p:.4g}, {hi_p:.4g}]; widen zgrid")
    Fm = np.maximum.accumulate(F)
    zlo = _inverse_interp(lo_p, Fm, cdf.z)
    zhi = _inverse_interp(hi_p, Fm, cdf.z)
    return float(mean + zlo), float(mean + zhi)


def _inverse_interp(p, F, z):
    i = int(np.searchsorted(F, p, side="left"))
    i = min(max(i, 1), len(F) - 1)
    f0, f1 = F[i - 1], F[i]
    if f1 == f0:
        return float(z[i])
    return float(z[i - 1] + (p - f0) * (z[i] - z[i - 1]) / (f1 - f0))


def mixture_quantile(variances, prob: float, tol: float = 1e-10, max_iter: int = 200):
    """Quantile of a mean-zero normal scale mixture, solved by bisection.

    ``variances`` is (n_draws,) or (n_draws, m); returns scalar or (m,).
    Used where grid resolution would dominate the error budget.
    """
    V = np.asarray(variances, dtype=float)
    squeeze = V.ndim == 1
    if squeeze:
        V = V[:, None]
    sd = np.sqrt(np.clip(V, 0.0, None))
    smax = sd.max(axis=0)
    lo = np.full(V.shape[1], -10.0) * smax
    hi = np.full(V.shape[1], 10.0) * smax
    pos = sd > 0
    safe = np.where(pos, sd, 1.0)
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        # components with V = 0 are a point mass at zero
        f = np.where(pos, ndtr(mid[None, :] / safe), (mid[None, :] >= 0)).mean(axis=0)
        below = f < prob
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo <= tol * np.maximum(smax, 1e-300)):
            break
    q = 0.5 * (lo + hi)
    return float(q[0]) if squeeze else q


def kale_krige(spec: KernelSpec, err: ErrorModel, obs, y, targets, alpha: float | None = 0.05,
               n_mc: int = DEFAULT_N_MC, cdf_draws: int = DEFAULT_CDF_DRAWS, seed: int = 0,
               cov: CovMatrices | None = None) -> KrigingResult:
    """KALE prediction with intervals from the exact error CDF."""
    if cov is None:
        cov = build_cov_matrices(spec, err, obs, targets, n_mc=n_mc, seed=seed)
    res = kale_predict(cov, y)
    if alpha is not None and err.degenerate:
        res.interval = normal_interval(res.mean, res.mse, alpha)
    elif alpha is not None:
        cdfs = kale_error_cdfs(spec, err, obs, targets, n_mc=cdf_draws, seed=seed, cov=cov)
        res.interval = np.array([kale_interval(c, m, alpha) for c, m in zip(cdfs, res.mean)])
    return res


def kile_krige(spec: KernelSpec, err: ErrorModel, obs, y, targets, alpha: float | None = 0.05,
               n_mc: int = DEFAULT_N_MC, seed: int = 0, cov: CovMatrices | None = None) -> KrigingResult:
    if cov is None:
        cov = build_cov_matrices(spec, err, obs, targets, n_mc=n_mc, seed=seed)
    res = kile_predict(cov, y)
    if alpha is not None:
        res.interval = kile_interval(res, alpha)
    return res


def single_site_kale_mse(tau2: float, beta: float, delta2: float, sigma2_u: float, p: int) -> float:
    """KALE MSE with one observation at squared distance ``delta2`` from the target.

    Closed form for the squared-exponential kernel without nugget and
    isotropic Gaussian errors.
    """
    a = 1.0 + 2.0 * beta * sigma2_u
    return tau2 * (1.0 - a ** (-p) * np.exp(-2.0 * beta * delta2 / a))


__all__ = [
    "ErrorCdf", "GridRangeError", "KrigingResult", "error_variances",
    "kale_error_cdf", "kale_error_cdfs", "kale_interval", "kale_krige", "kale_predict",
    "kile_interval", "kile_krige", "kile_predict", "mixture_quantile", "normal_interval",
    "single_site_kale_mse",
]
