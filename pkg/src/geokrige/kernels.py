"""Base covariances and the covariances induced by location error.

Two covariance families are supported:

``squared-exponential``
    ``c(s1, s2) = tau2 * exp(-beta * ||s1 - s2||^2) + sigma2_x * 1[s1 == s2]``
    on R^p.
``exponential-geodesic``
    ``c(s1, s2) = tau2 * exp(-beta * d_gc(s1, s2)) + sigma2_x * 1[s1 == s2]``
    with points given as (lon, lat) in degrees and the great-circle distance
    in km.

Observed values are ``y(s) = x(s + u)``.  Location error turns ``c`` into the
induced covariance ``k(s1, s2) = E[c(s1 + u1, s2 + u2)]`` between
observations and ``k*(s, s*) = E[c(s + u, s*)]`` between an observation and
an error-free target.  For the squared-exponential family with isotropic
Gaussian errors both have closed forms; everything else is evaluated by
Monte Carlo over error draws.

Nugget convention: the variance of an observation is ``tau2 + sigma2_x``
(the nugget belongs to each record).  Distinct records never share a
nugget, even at identical nominal coordinates, and prediction targets are
the nugget-free process value, so cross covariances never carry it.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

EARTH_RADIUS_KM = 6371.0
DEFAULT_N_MC = 4096

SQEXP = "squared-exponential"
GEODESIC = "exponential-geodesic"
FAMILIES = (SQEXP, GEODESIC)

ERR_NONE = "none"
ERR_IID = "iid-gaussian"
ERR_GEO = "geodesic-gaussian"
ERROR_KINDS = (ERR_NONE, ERR_IID, ERR_GEO)

_FAMILY_ALIASES = {"sqexp": SQEXP, "geodesic": GEODESIC, "exp-geodesic": GEODESIC}


class UnsupportedKernelError(ValueError):
    """No closed form exists for this family / error-model combination."""


@dataclass(frozen=True)
class KernelSpec:
    tau2: float
    beta: float
    sigma2_x: float = 0.0
    family: str = SQEXP

    def __post_init__(self):
        fam = _FAMILY_ALIASES.get(self.family, self.family)
        if fam not in FAMILIES:
            raise ValueError(f"unknown covariance family {self.family!r}")
        object.__setattr__(self, "family", fam)
        if not self.tau2 > 0:
            raise ValueError(f"tau2 must be positive, got {self.tau2}")
        if not self.beta > 0:
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not self.sigma2_x >= 0:
            raise ValueError(f"sigma2_x must be non-negative, got {self.sigma2_x}")

    @property
    def theta(self) -> np.ndarray:
        return np.array([self.tau2, self.beta, self.sigma2_x])

    def with_theta(self, theta) -> "KernelSpec":
        tau2, beta, sigma2_x = (float(v) for v in theta)
        return KernelSpec(tau2, beta, sigma2_x, self.family)


@dataclass(frozen=True)
class ErrorModel:
    """Distribution of location errors.

    ``iid-gaussian``: ``u ~ N(0, sigma2_u I_p)`` in input units.
    ``geodesic-gaussian``: additive (lon, lat) displacement in degrees with
    covariance ``sigma2_u (180 / (pi r))^2 diag(1 / cos^2(lat), 1)``, so
    ``sigma2_u`` is in km^2.
    """

    kind: str = ERR_NONE
    sigma2_u: float = 0.0
    dim: int = 2

    def __post_init__(self):
        if self.kind not in ERROR_KINDS:
            raise ValueError(f"unknown error model {self.kind!r}")
        if not self.sigma2_u >= 0:
            raise ValueError(f"sigma2_u must be non-negative, got {self.sigma2_u}")
        if self.kind == ERR_GEO and self.dim != 2:
            raise ValueError("geodesic errors are two dimensional (lon, lat)")

    @property
    def degenerate(self) -> bool:
        return self.kind == ERR_NONE or self.sigma2_u == 0.0

    def point_variances(self, s: np.ndarray) -> np.ndarray:
        """Per-coordinate error variances at nominal sites ``s`` (n, p)."""
        s = np.atleast_2d(np.asarray(s, dtype=float))
        n = s.shape[0]
        if self.degenerate:
            return np.zeros((n, self.dim))
        if self.kind == ERR_IID:
            return np.full((n, self.dim), self.sigma2_u)
        lat = np.deg2rad(s[:, 1])
        base = self.sigma2_u * (180.0 / (np.pi * EARTH_RADIUS_KM)) ** 2
        return np.column_stack([base / np.cos(lat) ** 2, np.full(n, base)])

    def displace(self, s: np.ndarray, u: np.ndarray) -> np.ndarray:
        """Apply errors ``u`` (broadcast against ``s``) to nominal sites."""
        z = s + u
        if self.kind == ERR_GEO:
            z = wrap_lonlat(z)
        return z


def wrap_lonlat(z: np.ndarray) -> np.ndarray:
    """Reflect latitudes across the poles and wrap longitudes to [-180, 180)."""
    z = np.array(z, dtype=float, copy=True)
    lon, lat = z[..., 0], z[..., 1]
    lat = (lat + 90.0) % 360.0 - 90.0  # now in [-90, 270)
    over = lat > 90.0
    lat = np.where(over, 180.0 - lat, lat)
    lon = np.where(over, lon + 180.0, lon)
    z[..., 0] = (lon + 180.0) % 360.0 - 180.0
    z[..., 1] = lat
    return z


# ----------------------------------------------------------------------
# distances and base covariance


def haversine_km(lon1, lat1, lon2, lat2):
    """Great-circle distance in km between (lon, lat) points in degrees."""
    lon1, lat1, lon2, lat2 = (np.deg2rad(np.asarray(v, dtype=float))
                              for v in (lon1, lat1, lon2, lat2))
    h = (np.sin(0.5 * (lat2 - lat1)) ** 2
         + np.cos(lat1) * np.cos(lat2) * np.sin(0.5 * (lon2 - lon1)) ** 2)
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def pairwise_metric(family: str, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Distance entering the exponent: squared Euclidean or great-circle km.

    ``a`` is (..., n, p), ``b`` is (..., m, p); result is (..., n, m).
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if family == SQEXP:
        diff = a[..., :, None, :] - b[..., None, :, :]
        return np.einsum("...k,...k->...", diff, diff)
    return haversine_km(a[..., :, None, 0], a[..., :, None, 1],
                        b[..., None, :, 0], b[..., None, :, 1])


def _check_points(s1, s2):
    s1 = np.asarray(s1, dtype=float).ravel()
    s2 = np.asarray(s2, dtype=float).ravel()
    if s1.shape != s2.shape:
        raise ValueError(f"dimension mismatch: {s1.shape[0]} vs {s2.shape[0]}")
    return s1, s2


def eval_c(spec: KernelSpec, s1, s2) -> float:
    """Base covariance ``c(s1, s2)``; the nugget is added only on exact coincidence."""
    s1, s2 = _check_points(s1, s2)
    d = pairwise_metric(spec.family, s1[None], s2[None])[0, 0]
    val = spec.tau2 * np.exp(-spec.beta * d)
    if np.array_equal(s1, s2):
        val += spec.sigma2_x
    return float(val)


def base_cov(spec: KernelSpec, a, b=None) -> np.ndarray:
    """Covariance matrix of ``c`` between site sets.

    With ``b`` omitted the result is the (n, n) matrix of ``a`` with itself
    and the nugget is placed on the diagonal (one nugget per record).
    Cross matrices (``b`` given) are nugget free.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    if b is None:
        out = spec.tau2 * np.exp(-spec.beta * pairwise_metric(spec.family, a, a))
        out[np.diag_indices_from(out)] = spec.tau2 + spec.sigma2_x
        return out
    b = np.atleast_2d(np.asarray(b, dtype=float))
    return spec.tau2 * np.exp(-spec.beta * pairwise_metric(spec.family, a, b))


# ----------------------------------------------------------------------
# closed forms (squared exponential + isotropic Gaussian errors)


def _closed_form_ok(spec: KernelSpec, err: ErrorModel) -> bool:
    if err.degenerate:
        return True
    return spec.family == SQEXP and err.kind == ERR_IID


def has_closed_form(spec: KernelSpec, err: ErrorModel) -> bool:
    return _closed_form_ok(spec, err)


def _require_closed(spec, err):
    if not _closed_form_ok(spec, err):
        raise UnsupportedKernelError(
            f"no closed form for family={spec.family!r} with errors={err.kind!r}; "
            "use eval_k_mc"
        )


def _sqexp_scale(spec: KernelSpec, err: ErrorModel, n_err: int) -> float:
    # n_err independent errors enter the difference: variance n_err * sigma2_u
    s2 = 0.0 if err.degenerate else err.sigma2_u
    return 1.0 + 2.0 * n_err * spec.beta * s2


def eval_k_closed(spec: KernelSpec, err: ErrorModel, s1, s2, same: bool | None = None) -> float:
    """Closed-form induced covariance between two observations.

    ``same`` marks the variance branch (one record with itself); by default
    it is inferred from coordinate equality.
    """
    _require_closed(spec, err)
    s1, s2 = _check_points(s1, s2)
    if same is None:
        same = bool(np.array_equal(s1, s2))
    if same:
        return spec.tau2 + spec.sigma2_x
    if err.degenerate:
        return float(spec.tau2 * np.exp(-spec.beta * pairwise_metric(spec.family, s1[None], s2[None])[0, 0]))
    a = _sqexp_scale(spec, err, 2)
    p = s1.shape[0]
    d2 = float(np.sum((s1 - s2) ** 2))
    return float(spec.tau2 * a ** (-0.5 * p) * np.exp(-spec.beta * d2 / a))


def eval_kstar_closed(spec: KernelSpec, err: ErrorModel, s, sstar) -> float:
    """Closed-form ``k*(s, s*) = E[c(s + u, s*)]`` (nugget free)."""
    _require_closed(spec, err)
    s, sstar = _check_points(s, sstar)
    if err.degenerate:
        return float(spec.tau2 * np.exp(-spec.beta * pairwise_metric(spec.family, s[None], sstar[None])[0, 0]))
    a = _sqexp_scale(spec, err, 1)
    p = s.shape[0]
    d2 = float(np.sum((s - sstar) ** 2))
    return float(spec.tau2 * a ** (-0.5 * p) * np.exp(-spec.beta * d2 / a))


# ----------------------------------------------------------------------
# Monte Carlo


def point_stream(seed: int, tag: int, index: int) -> np.random.Generator:
    """Counter-keyed generator for error draws of one site."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(tag, index)))


def draw_errors(err: ErrorModel, s: np.ndarray, n_mc: int, seed: int, tag: int = 0) -> np.ndarray:
    """Error draws of shape (n_mc, n, p), one independent stream per site index."""
    s = np.atleast_2d(np.asarray(s, dtype=float))
    n, p = s.shape
    sd = np.sqrt(err.point_variances(s))
    out = np.empty((n_mc, n, p))
    for i in range(n):
        out[:, i, :] = point_stream(seed, tag, i).standard_normal((n_mc, p)) * sd[i]
    return out


def eval_k_mc(spec: KernelSpec, err: ErrorModel, s1, s2, n_mc: int = DEFAULT_N_MC,
              seed: int = 0, same: bool | None = None) -> float:
    """Monte Carlo estimate of ``k(s1, s2)``.

    For the variance branch a single shared error is used, which for a
    stationary ``c`` gives exactly ``tau2 + sigma2_x``.
    """
    if n_mc < 1:
        raise ValueError("n_mc must be at least 1")
    s1, s2 = _check_points(s1, s2)
    if same is None:
        same = bool(np.array_equal(s1, s2))
    pts = np.vstack([s1, s2])
    u = draw_errors(err, pts, n_mc, seed)
    z1 = err.displace(s1, u[:, 0])
    if same:
        vals = np.full(n_mc, spec.tau2 + spec.sigma2_x)
        # shared error: c(z, z) with identical arguments
        del z1
        return float(np.mean(vals))
    z2 = err.displace(s2, u[:, 1])
    if spec.family == SQEXP:
        d = np.sum((z1 - z2) ** 2, axis=-1)
    else:
        d = haversine_km(z1[:, 0], z1[:, 1], z2[:, 0], z2[:, 1])
    return float(np.mean(spec.tau2 * np.exp(-spec.beta * d)))


def eval_kstar_mc(spec: KernelSpec, err: ErrorModel, s, sstar, n_mc: int = DEFAULT_N_MC,
                  seed: int = 0) -> float:
    s, sstar = _check_points(s, sstar)
    u = draw_errors(err, s[None], n_mc, seed)[:, 0]
    z = err.displace(s, u)
    if spec.family == SQEXP:
        d = np.sum((z - sstar) ** 2, axis=-1)
    else:
        d = haversine_km(z[:, 0], z[:, 1], sstar[0], sstar[1])
    return float(np.mean(spec.tau2 * np.exp(-spec.beta * d)))


# ----------------------------------------------------------------------
# matrices


@dataclass(frozen=True)
class CovMatrices:
    """Covariance blocks for Kriging.

    ``K``/``Kstar`` use the induced kernels, ``C``/``Cstar`` the base kernel
    at nominal sites.  ``c_star_star`` is the variance of the (nugget-free)
    prediction target, i.e. ``tau2``.
    """

    K: np.ndarray
    Kstar: np.ndarray
    C: np.ndarray
    Cstar: np.ndarray
    c_star_star: np.ndarray
    spec: KernelSpec | None = field(default=None, compare=False)
    err: ErrorModel | None = field(default=None, compare=False)


class InducedGram:
    """Induced covariance of a fixed site set as a function of ``theta``.

    Monte Carlo draws of the metric between displaced sites are made once
    and reused for every ``theta`` (common random numbers), so
    ``K(theta)`` is a smooth deterministic function suitable for
    quasi-Newton optimization.  Each MC replicate is a valid covariance
    matrix, so the average stays positive semi-definite.
    """

    def __init__(self, family: str, err: ErrorModel, s, n_mc: int = DEFAULT_N_MC,
                 seed: int = 0, targets=None):
        self.family = _FAMILY_ALIASES.get(family, family)
        self.err = err
        self.s = np.atleast_2d(np.asarray(s, dtype=float))
        self.n, self.p = self.s.shape
        self.targets = None if targets is None else np.atleast_2d(np.asarray(targets, dtype=float))
        probe = KernelSpec(1.0, 1.0, 0.0, self.family)
        self.closed = has_closed_form(probe, err)
        self.iu = np.triu_indices(self.n, 1)
        if self.closed:
            self.metric = pairwise_metric(self.family, self.s, self.s)[self.iu]
            if self.targets is not None:
                self.metric_star = pairwise_metric(self.family, self.s, self.targets)
            self.n_mc = 0
        else:
            u = draw_errors(err, self.s, n_mc, seed)
            z = err.displace(self.s[None], u)
            self.n_mc = n_mc
            self.metric = np.empty((n_mc, self.iu[0].size))
            chunk = max(1, 2_000_000 // max(1, self.n * self.n))
            for start in range(0, n_mc, chunk):
                zz = z[start:start + chunk]
                self.metric[start:start + chunk] = pairwise_metric(self.family, zz, zz)[:, self.iu[0], self.iu[1]]
            if self.targets is not None:
                self.metric_star = np.empty((n_mc, self.n, self.targets.shape[0]))
                for start in range(0, n_mc, chunk):
                    self.metric_star[start:start + chunk] = pairwise_metric(
                        self.family, z[start:start + chunk], self.targets)

    def _scale(self, beta, sigma2_u, n_err):
        if self.err.degenerate:
            return 1.0
        return 1.0 + 2.0 * n_err * beta * sigma2_u

    def _assemble(self, off, diag) -> np.ndarray:
        out = np.empty((self.n, self.n))
        out[self.iu] = off
        out.T[self.iu] = off
        out[np.diag_indices(self.n)] = diag
        return out

    def __call__(self, theta) -> np.ndarray:
        return self.matrix_and_grad(theta, grad=False)[0]

    def matrix_and_grad(self, theta, grad: bool = True):
        """Return ``K(theta)`` and, optionally, ``[dK/dtau2, dK/dbeta, dK/dsigma2_x]``."""
        tau2, beta, sigma2_x = (float(v) for v in theta)
        if self.closed:
            if self.err.degenerate:
                corr = np.exp(-beta * self.metric)
                dlog_beta = -self.metric
            else:
                a = self._scale(beta, self.err.sigma2_u, 2)
                c4 = 4.0 * self.err.sigma2_u
                corr = a ** (-0.5 * self.p) * np.exp(-beta * self.metric / a)
                # d/dbeta of log(corr)
                dlog_beta = -0.5 * self.p * c4 / a - self.metric / a ** 2
            off = tau2 * corr
            K = self._assemble(off, tau2 + sigma2_x)
            if not grad:
                return K, None
            dt = self._assemble(corr, 1.0)
            db = self._assemble(off * dlog_beta, 0.0)
        else:
            e = np.exp(-beta * self.metric)
            corr = e.mean(axis=0)
            off = tau2 * corr
            K = self._assemble(off, tau2 + sigma2_x)
            if not grad:
                return K, None
            dt = self._assemble(corr, 1.0)
            db = self._assemble(-tau2 * (self.metric * e).mean(axis=0), 0.0)
        ds = np.eye(self.n)
        return K, [dt, db, ds]

    def cross(self, theta) -> np.ndarray:
        """Induced cross covariance ``K*`` (n, m) to the targets."""
        if self.targets is None:
            raise ValueError("InducedGram built without targets")
        tau2, beta, _ = (float(v) for v in theta)
        if self.closed:
            if self.err.degenerate:
                return tau2 * np.exp(-beta * self.metric_star)
            a = self._scale(beta, self.err.sigma2_u, 1)
            return tau2 * a ** (-0.5 * self.p) * np.exp(-beta * self.metric_star / a)
        return tau2 * np.exp(-beta * self.metric_star).mean(axis=0)


def build_cov_matrices(spec: KernelSpec, err: ErrorModel, obs, targets=None,
                       n_mc: int = DEFAULT_N_MC, seed: int = 0) -> CovMatrices:
    """Assemble all Kriging covariance blocks.

    Closed forms are used where available; otherwise ``K`` and ``K*`` are
    Monte Carlo averages over joint draws of the site errors.
    """
    obs = np.atleast_2d(np.asarray(obs, dtype=float))
    if obs.shape[0] == 0:
        raise ValueError("need at least one observation")
    if targets is None:
        targets = np.empty((0, obs.shape[1]))
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    if targets.size and targets.shape[1] != obs.shape[1]:
        raise ValueError("targets and observations differ in dimension")
    gram = InducedGram(spec.family, err, obs, n_mc=n_mc, seed=seed,
                       targets=targets if targets.size else None)
    K = gram(spec.theta)
    m = targets.shape[0]
    Kstar = gram.cross(spec.theta) if m else np.empty((obs.shape[0], 0))
    C = base_cov(spec, obs)
    Cstar = base_cov(spec, obs, targets) if m else np.empty((obs.shape[0], 0))
    return CovMatrices(K=K, Kstar=Kstar, C=C, Cstar=Cstar,
                       c_star_star=np.full(m, spec.tau2), spec=spec, err=err)
