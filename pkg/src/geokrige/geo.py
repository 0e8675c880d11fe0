"""Interpolation of gridded anomalies on the sphere under location error.

Sites are (longitude, latitude) in degrees.  The base kernel is
exponential in great-circle distance and location errors are additive in
degrees with a latitude-dependent longitude variance, so a fixed error in
km stretches in longitude towards the poles.  No closed form exists for the
induced kernel here, so ``K`` and ``K*`` are Monte Carlo averages.
"""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .estimation import fit_mple
from .kernels import (EARTH_RADIUS_KM, ERR_GEO, ERR_NONE, GEODESIC, ErrorModel, KernelSpec,
                      base_cov, build_cov_matrices, haversine_km)
from .kriging import kale_krige, kile_krige
from .sampler import HMCConfig, PriorSpec, run_hmc

DEFAULT_SIGMA2_U = 7500.0
POLE_GUARD = 89.5
GEO_BOX = {"tau2": (1e-4, 100.0), "beta": (1e-6, 1e-2), "sigma2_x": (1e-6, 100.0)}
MODES = ("KALE", "KILE", "HMC")


class GeoInputError(ValueError):
    """Malformed or out-of-range geographic input."""


class PoleProximityError(GeoInputError):
    pass


@dataclass(frozen=True)
class GeoPoint:
    lon: float
    lat: float

    def __post_init__(self):
        if not (-180.0 <= self.lon <= 180.0):
            raise GeoInputError(f"longitude {self.lon} outside [-180, 180]")
        if not (-90.0 <= self.lat <= 90.0):
            raise GeoInputError(f"latitude {self.lat} outside [-90, 90]")


def great_circle(a: GeoPoint, b: GeoPoint) -> float:
    """Haversine distance in km on a sphere of radius 6371 km."""
    return float(haversine_km(a.lon, a.lat, b.lon, b.lat))


def geo_error_cov(phi: float, sigma2_u: float = DEFAULT_SIGMA2_U) -> np.ndarray:
    """Covariance (degrees^2) of the (lon, lat) error at latitude ``phi``."""
    if abs(phi) >= POLE_GUARD:
        raise PoleProximityError(f"latitude {phi} within {90 - POLE_GUARD} degrees of a pole")
    base = sigma2_u * (180.0 / (np.pi * EARTH_RADIUS_KM)) ** 2
    return np.diag([base / np.cos(np.deg2rad(phi)) ** 2, base])


@dataclass
class GeoDataset:
    lon: np.ndarray
    lat: np.ndarray
    value: np.ndarray
    count: np.ndarray | None = None
    offset: float = 0.0  # mean removed by centering

    def __post_init__(self):
        self.lon = np.asarray(self.lon, dtype=float)
        self.lat = np.asarray(self.lat, dtype=float)
        self.value = np.asarray(self.value, dtype=float)
        if not (self.lon.shape == self.lat.shape == self.value.shape) or self.lon.ndim != 1:
            raise GeoInputError("lon, lat and value must be 1-d arrays of equal length")
        if self.lon.size == 0:
            raise GeoInputError("empty dataset")
        if np.any(np.abs(self.lon) > 180.0) or np.any(np.abs(self.lat) > 90.0):
            raise GeoInputError("coordinates out of bounds")
        if not np.all(np.isfinite(self.value)):
            raise GeoInputError("non-finite values")

    @property
    def sites(self) -> np.ndarray:
        return np.column_stack([self.lon, self.lat])

    def __len__(self):
        return self.lon.size

    def centered(self) -> "GeoDataset":
        mu = float(self.value.mean())
        return GeoDataset(self.lon, self.lat, self.value - mu, self.count, self.offset + mu)


def _parse_float(text, line, name):
    try:
        v = float(text)
    except ValueError:
        raise GeoInputError(f"line {line}: cannot parse {name} {text!r}") from None
    if not np.isfinite(v):
        raise GeoInputError(f"line {line}: {name} is not finite")
    return v


def parse_geo_csv(text: str, center: bool = False) -> GeoDataset:
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise GeoInputError("line 1: missing header")
    header = [h.strip() for h in rows[0]]
    if header not in (["lon", "lat", "value"], ["lon", "lat", "value", "count"]):
        raise GeoInputError(f"line 1: expected header lon,lat,value[,count], got {','.join(header)}")
    has_count = len(header) == 4
    lon, lat, val, cnt = [], [], [], []
    seen: dict[tuple, int] = {}
    dups = []
    for k, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise GeoInputError(f"line {k}: expected {len(header)} fields, got {len(row)}")
        x = _parse_float(row[0], k, "lon")
        y = _parse_float(row[1], k, "lat")
        if not -180.0 <= x <= 180.0:
            raise GeoInputError(f"line {k}: longitude {x} outside [-180, 180]")
        if not -90.0 <= y <= 90.0:
            raise GeoInputError(f"line {k}: latitude {y} outside [-90, 90]")
        val.append(_parse_float(row[2], k, "value"))
        if has_count:
            c = _parse_float(row[3], k, "count")
            if c < 0 or c != int(c):
                raise GeoInputError(f"line {k}: count must be a non-negative integer")
            cnt.append(int(c))
        if (x, y) in seen:
            dups.append((seen[(x, y)], k))
        seen.setdefault((x, y), k)
        lon.append(x)
        lat.append(y)
    if dups:
        raise GeoInputError("duplicate grid centers on lines " + ", ".join(f"{a} and {b}" for a, b in dups))
    if not lon:
        raise GeoInputError("empty dataset: no records after header")
    ds = GeoDataset(np.array(lon), np.array(lat), np.array(val), np.array(cnt) if has_count else None)
    return ds.centered() if center else ds


def load_geo_csv(path, center: bool = False) -> GeoDataset:
    """Read ``lon,lat,value[,count]`` records; optionally subtract the mean value."""
    return parse_geo_csv(Path(path).read_text(encoding="utf-8"), center=center)


def save_geo_csv(data: GeoDataset, path) -> None:
    """Write a dataset so that :func:`load_geo_csv` reads back identical floats."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    header = ["lon", "lat", "value"] + (["count"] if data.count is not None else [])
    w.writerow(header)
    for i in range(len(data)):
        row = [repr(float(data.lon[i])), repr(float(data.lat[i])), repr(float(data.value[i]))]
        if data.count is not None:
            row.append(str(int(data.count[i])))
        w.writerow(row)
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def grid_centers(lon_range, lat_range, step: float = 5.0) -> np.ndarray:
    """Centers of ``step``-degree cells covering the given ranges, (k, 2)."""
    lons = np.arange(lon_range[0] + step / 2, lon_range[1], step)
    lats = np.arange(lat_range[0] + step / 2, lat_range[1], step)
    return np.array([(a, b) for b in lats for a in lons])


def geo_error_model(sigma2_u: float) -> ErrorModel:
    return ErrorModel(ERR_GEO if sigma2_u > 0 else ERR_NONE, float(sigma2_u), 2)


def synthetic_geo(spec: KernelSpec, sigma2_u: float, centers, n_obs: int, seed: int = 0):
    """Simulate anomalies on grid centers observed at displaced locations.

    Returns ``(dataset, targets, truth)`` where ``truth`` holds the true
    displaced sites of the observations.
    """
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, dtype=float)
    idx = rng.permutation(len(centers))
    obs, targets = centers[np.sort(idx[:n_obs])], centers[np.sort(idx[n_obs:])]
    err = geo_error_model(sigma2_u)
    sd = np.sqrt(err.point_variances(obs))
    z = err.displace(obs, sd * rng.standard_normal(obs.shape))
    C = base_cov(KernelSpec(spec.tau2, spec.beta, spec.sigma2_x, GEODESIC), z)
    y = np.linalg.cholesky(C) @ rng.standard_normal(n_obs)
    return GeoDataset(obs[:, 0], obs[:, 1], y), targets, z


@dataclass
class GeoPrediction:
    targets: np.ndarray
    mean: np.ndarray
    var: np.ndarray
    interval: np.ndarray
    theta: dict
    mode: str
    sigma2_u: float
    runtime_s: float
    diagnostics: dict = field(default_factory=dict)

    def summary(self) -> dict:
        return {"tau2": self.theta["tau2"], "beta": self.theta["beta"],
                "sigma2_x": self.theta["sigma2_x"], "mode": self.mode,
                "sigma2_u": self.sigma2_u, "runtime_s": self.runtime_s}


def _check_poles(sites, sigma2_u):
    if sigma2_u > 0 and np.any(np.abs(sites[:, 1]) >= POLE_GUARD):
        raise PoleProximityError(f"sites within {90 - POLE_GUARD} degrees of a pole")


def geo_interpolate(data: GeoDataset, targets, sigma2_u: float = DEFAULT_SIGMA2_U, mode: str = "KALE",
                    n_mc: int = 1024, n_restarts: int = 8, seed: int = 0, alpha: float = 0.05,
                    box: dict | None = None, hmc: HMCConfig | None = None,
                    prior: PriorSpec | None = None) -> GeoPrediction:
    """Predict anomalies at ``targets`` (k, 2) with the exponential great-circle kernel.

    Kriging modes plug in pseudo-likelihood estimates (KILE fits and
    predicts as if the sites were exact); HMC samples the parameters
    jointly with the location errors.  ``sigma2_u`` (km^2) is held fixed.
    """
    mode = mode.upper()
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    targets = np.atleast_2d(np.asarray(targets, dtype=float))
    _check_poles(data.sites, sigma2_u)
    t0 = time.perf_counter()
    err = geo_error_model(sigma2_u if mode != "KILE" else 0.0)
    box = {**GEO_BOX, **(box or {})}
    diag = {}
    if mode == "HMC":
        prior = prior or PriorSpec(tau2=box["tau2"], beta=box["beta"], sigma2_x=box["sigma2_x"])
        hmc = hmc or HMCConfig(seed=seed, alpha=alpha)
        s = run_hmc(prior, GEODESIC, data.sites, data.value, targets, hmc, err=err, theta={},
                    sample=("tau2", "beta", "sigma2_x"), keep_draws=False)
        theta = s.theta_mean
        mean, var, iv = s.mean, s.pred_var, s.interval
        diag = {"max_rhat": s.max_rhat, "min_ess": s.min_ess, "acceptance": s.acceptance_rate,
                "divergences": s.divergences, "warnings": list(s.warnings)}
    else:
        fit = fit_mple(err, data.sites, data.value, box=box, n_restarts=n_restarts, seed=seed,
                       family=GEODESIC, n_mc=n_mc)
        spec = KernelSpec(*fit.theta_hat, family=GEODESIC)
        cov = build_cov_matrices(spec, err, data.sites, targets, n_mc=n_mc, seed=seed)
        if mode == "KALE":
            res = kale_krige(spec, err, data.sites, data.value, targets, alpha, seed=seed, cov=cov)
            var = res.mse
        else:
            res = kile_krige(spec, err, data.sites, data.value, targets, alpha, seed=seed, cov=cov)
            var = res.naive_var
        theta = dict(zip(("tau2", "beta", "sigma2_x"), (float(v) for v in fit.theta_hat)))
        mean, iv = res.mean, res.interval
        diag = {"log_pseudolik": fit.log_pseudolik, "converged": fit.converged}
    return GeoPrediction(targets, mean + data.offset, var, iv + data.offset, theta, mode,
                         float(sigma2_u), time.perf_counter() - t0, diag)
