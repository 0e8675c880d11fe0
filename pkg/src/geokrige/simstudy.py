"""Simulation study of Kriging under location error.

Data are simulated on a fixed 8 x 8 integer grid design with 54 observed
and 10 held-out sites.  Each replicate is scored against the exact Gaussian
conditional of the targets given the simulated data *and* the simulated
location errors, which removes the noise of drawing the targets themselves.
Targets are the nugget-free process, so the reported RMSE already has the
nugget variance removed.
"""

from __future__ import annotations

import itertools
import json
import logging
import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy.special import ndtr

from .estimation import FitError, fit_mple
from .gp_core import SingularMatrixError, cholesky, condition
from .kernels import SQEXP, ErrorModel, KernelSpec, base_cov, build_cov_matrices
from .kriging import error_variances, kale_predict, kile_predict, mixture_quantile, normal_interval
from .sampler import HMCConfig, PriorSpec, posterior_predict

log = logging.getLogger("geokrige.diagnostics")

GRID_SIZE = 8
N_OBS = 54
BETAS = (0.001, 0.01, 0.1, 0.5, 1.0, 2.0)
SIGMA2_XS = (0.0001, 0.01, 0.1, 0.5, 1.0)
SIGMA2_US = (0.0001, 0.01, 0.1, 0.5, 1.0)
METHODS = ("KALE", "KILE", "HMC")
CSV_COLUMNS = ("tau2", "beta", "sigma2_x", "sigma2_u", "params_known", "method", "rmse", "rmse_se",
               "coverage", "coverage_se", "seconds", "n_failed")


@dataclass(frozen=True)
class SweepCell:
    beta: float
    sigma2_x: float
    sigma2_u: float
    tau2: float = 1.0
    params_known: bool = True

    def __post_init__(self):
        if not (self.beta > 0 and self.tau2 > 0 and self.sigma2_x >= 0 and self.sigma2_u >= 0):
            raise ValueError(f"invalid cell {self}")

    @property
    def spec(self) -> KernelSpec:
        return KernelSpec(self.tau2, self.beta, self.sigma2_x, SQEXP)

    @property
    def err(self) -> ErrorModel:
        return ErrorModel("iid-gaussian", self.sigma2_u, 2)

    @property
    def key(self) -> int:
        """Stable integer key derived from the parameter values."""
        text = f"{self.tau2!r}|{self.beta!r}|{self.sigma2_x!r}|{self.sigma2_u!r}|{int(self.params_known)}"
        return zlib.crc32(text.encode())

    @property
    def label(self) -> str:
        return (f"tau2={self.tau2:g}_beta={self.beta:g}_sx={self.sigma2_x:g}_su={self.sigma2_u:g}"
                f"_{'known' if self.params_known else 'est'}")


def table1_cells(params_known: bool = True) -> list[SweepCell]:
    return [SweepCell(b, sx, su, 1.0, params_known)
            for b, sx, su in itertools.product(BETAS, SIGMA2_XS, SIGMA2_US)]


@dataclass(frozen=True)
class Design:
    obs: np.ndarray
    targets: np.ndarray


def make_design(seed: int = 0) -> Design:
    """Split the 8 x 8 integer grid into 54 observed and 10 target sites."""
    grid = np.array([(i, j) for i in range(GRID_SIZE) for j in range(GRID_SIZE)], dtype=float)
    perm = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(0xD5,))).permutation(len(grid))
    obs_idx = np.sort(perm[:N_OBS])
    tgt_idx = np.sort(perm[N_OBS:])
    return Design(grid[obs_idx], grid[tgt_idx])


@dataclass
class Replicate:
    y: np.ndarray
    u: np.ndarray
    cond_mean: np.ndarray
    cond_var: np.ndarray


def rep_generator(cell: SweepCell, seed: int, j: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, cell.key], spawn_key=(j,)))


def simulate_rep(cell: SweepCell, design: Design, rng) -> Replicate:
    """Simulate one dataset and the conditional of the targets given it.

    ``y_i = x(s_i + u_i) + e_i`` with ``u_i ~ N(0, sigma2_u I)`` and nugget
    noise ``e_i``; the returned conditional is that of the nugget-free
    ``x`` at the targets given ``(y, u)``.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    n, p = design.obs.shape
    u = np.sqrt(cell.sigma2_u) * rng.standard_normal((n, p))
    z = design.obs + u
    spec = cell.spec
    C = base_cov(spec, z)
    fac = cholesky(C)
    y = fac.factor @ rng.standard_normal(n)
    smooth = replace(spec, sigma2_x=0.0)
    cond = condition(base_cov(smooth, design.targets), base_cov(spec, design.targets, z), C, y, factor=fac)
    return Replicate(y, u, cond.mean, cond.var)


def rao_blackwell_scores(rep: Replicate, prediction, interval=None) -> tuple[float, float]:
    """Conditional RMSE and expected interval coverage for one replicate.

    ``rmse = sqrt(mean_k((m_k - xhat_k)^2 + v_k))`` and
    ``cov = mean_k P(L_k <= x_k <= U_k)`` where ``(m_k, v_k)`` is the exact
    conditional of the target given the data and the true location errors.
    Coverage is NaN when no interval is supplied.
    """
    m, v = rep.cond_mean, rep.cond_var
    pred = np.asarray(prediction, dtype=float)
    rmse = float(np.sqrt(np.mean((m - pred) ** 2 + v)))
    if interval is None:
        return rmse, float("nan")
    lo, hi = np.asarray(interval, dtype=float).T
    sd = np.sqrt(v)
    with np.errstate(divide="ignore", invalid="ignore"):
        pu = np.where(sd > 0, ndtr((hi - m) / sd), (m <= hi).astype(float))
        pl = np.where(sd > 0, ndtr((lo - m) / sd), (m < lo).astype(float))
    return rmse, float(np.mean(pu - pl))


@dataclass
class SweepConfig:
    n_reps: int = 100
    seed: int = 0
    design_seed: int = 0
    alpha: float = 0.05
    cdf_draws: int = 2000
    n_restarts: int = 8
    hmc: HMCConfig = field(default_factory=lambda: HMCConfig(n_chains=2, n_warmup=1000, n_draws=2000))
    hmc_batch: int = 50
    checkpoint_dir: str | None = None
    workers: int = 1
    timing: bool = False

    def fingerprint(self, methods) -> str:
        d = asdict(self)
        for k in ("checkpoint_dir", "workers", "timing", "hmc_batch"):
            d.pop(k)
        d["methods"] = list(methods)
        return json.dumps(d, sort_keys=True)


@dataclass
class CellResult:
    cell: SweepCell
    method: str
    rmse: float
    rmse_se: float
    coverage: float
    coverage_se: float
    seconds: float
    n_failed: int = 0
    n_reps: int = 0
    rmse_reps: np.ndarray | None = None
    coverage_reps: np.ndarray | None = None

    @property
    def flagged(self) -> bool:
        return self.n_reps > 0 and self.n_failed > 0.05 * self.n_reps


def _aggregate(cell, method, rm, cv, seconds, n_failed):
    rm = np.asarray(rm, dtype=float)
    cv = np.asarray(cv, dtype=float)
    ok = np.isfinite(rm)
    mse = rm[ok] ** 2
    J = max(1, ok.sum())
    rmse = float(np.sqrt(mse.mean())) if ok.any() else float("nan")
    mse_se = float(mse.std(ddof=1) / np.sqrt(J)) if ok.sum() > 1 else float("nan")
    rmse_se = mse_se / (2.0 * rmse) if rmse > 0 else float("nan")
    okc = np.isfinite(cv)
    if okc.any():
        cov = float(cv[okc].mean())
        cov_se = float(cv[okc].std(ddof=1) / np.sqrt(okc.sum())) if okc.sum() > 1 else float("nan")
    else:
        cov = cov_se = float("nan")
    return CellResult(cell, method, rmse, rmse_se, cov, cov_se, seconds, n_failed, len(rm), rm, cv)


def _kale_halfwidths(spec, err, design, gamma, alpha, n_draws, seed):
    V = error_variances(spec, err, design.obs, design.targets, gamma, n_mc=n_draws, seed=seed)
    return V, np.array([mixture_quantile(V[:, j], 1.0 - alpha / 2.0) for j in range(V.shape[1])])


def _known_theta_kriging(cell, design, reps, config, methods):
    cov = build_cov_matrices(cell.spec, cell.err, design.obs, design.targets)
    out = {}
    if "KALE" in methods:
        t0 = time.perf_counter()
        dummy = kale_predict(cov, np.zeros(len(design.obs)))
        _, half = _kale_halfwidths(cell.spec, cell.err, design, dummy.weights, config.alpha,
                                   config.cdf_draws, config.seed)
        scores = []
        for rep in reps:
            mean = dummy.weights.T @ rep.y
            scores.append(rao_blackwell_scores(rep, mean, np.column_stack([mean - half, mean + half])))
        out["KALE"] = (scores, time.perf_counter() - t0, 0)
    if "KILE" in methods:
        t0 = time.perf_counter()
        dummy = kile_predict(cov, np.zeros(len(design.obs)))
        scores = []
        for rep in reps:
            mean = dummy.weights.T @ rep.y
            scores.append(rao_blackwell_scores(rep, mean, normal_interval(mean, dummy.naive_var, config.alpha)))
        out["KILE"] = (scores, time.perf_counter() - t0, 0)
    return out


def _plugin_kriging(cell, design, reps, config, methods):
    """Kriging with parameters estimated per replicate by pseudo-likelihood."""
    out = {}
    none = ErrorModel("none", 0.0, 2)
    for method in ("KALE", "KILE"):
        if method not in methods:
            continue
        t0 = time.perf_counter()
        err = cell.err if method == "KALE" else none
        scores, failed = [], 0
        for j, rep in enumerate(reps):
            try:
                fit = fit_mple(err, design.obs, rep.y, n_restarts=config.n_restarts,
                               seed=config.seed + j)
                spec = KernelSpec(*fit.theta_hat, family=SQEXP)
                cov = build_cov_matrices(spec, err, design.obs, design.targets)
                if method == "KALE":
                    res = kale_predict(cov, rep.y)
                    if err.degenerate:
                        iv = normal_interval(res.mean, res.mse, config.alpha)
                    else:
                        _, half = _kale_halfwidths(spec, err, design, res.weights, config.alpha,
                                                   config.cdf_draws, config.seed + j)
                        iv = np.column_stack([res.mean - half, res.mean + half])
                else:
                    res = kile_predict(cov, rep.y)
                    iv = normal_interval(res.mean, res.naive_var, config.alpha)
                scores.append(rao_blackwell_scores(rep, res.mean, iv))
            except (FitError, SingularMatrixError, FloatingPointError) as exc:
                log.warning("%s %s replicate %d failed: %s", cell.label, method, j, exc)
                scores.append((float("nan"), float("nan")))
                failed += 1
        out[method] = (scores, time.perf_counter() - t0, failed)
    return out


def _hmc_scores(cell, design, reps, config):
    t0 = time.perf_counter()
    sample = () if cell.params_known else ("tau2", "beta", "sigma2_x")
    hmc = replace(config.hmc, alpha=config.alpha, seed=config.seed ^ (cell.key & 0x7FFFFFFF))
    scores, failed = [], 0
    for start in range(0, len(reps), config.hmc_batch):
        chunk = reps[start:start + config.hmc_batch]
        Y = np.stack([r.y for r in chunk])
        keys = np.arange(start, start + len(chunk))
        try:
            summaries = posterior_predict(SQEXP, cell.err, design.obs, Y, design.targets,
                                          cell.spec, PriorSpec(), sample, hmc, keys=keys)
        except FloatingPointError as exc:
            log.warning("%s HMC batch at %d failed: %s", cell.label, start, exc)
            scores.extend([(float("nan"), float("nan"))] * len(chunk))
            failed += len(chunk)
            continue
        for rep, s in zip(chunk, summaries):
            scores.append(rao_blackwell_scores(rep, s.mean, s.interval))
    return scores, time.perf_counter() - t0, failed


def run_cell(cell: SweepCell, methods=METHODS, config: SweepConfig | None = None,
             design: Design | None = None) -> list[CellResult]:
    """Simulate ``config.n_reps`` replicates of one cell and score every method."""
    config = config or SweepConfig()
    design = design or make_design(config.design_seed)
    reps = [simulate_rep(cell, design, rep_generator(cell, config.seed, j)) for j in range(config.n_reps)]
    if cell.params_known:
        raw = _known_theta_kriging(cell, design, reps, config, methods)
    else:
        raw = _plugin_kriging(cell, design, reps, config, methods)
    if "HMC" in methods:
        raw["HMC"] = _hmc_scores(cell, design, reps, config)
    out = []
    for method in methods:
        scores, secs, failed = raw[method]
        rm, cv = (np.array(v) for v in zip(*scores))
        res = _aggregate(cell, method, rm, cv, secs, failed)
        if res.flagged:
            log.warning("%s %s: %d of %d replicates failed", cell.label, method, failed, len(reps))
        out.append(res)
    return out


def _checkpoint_path(config, cell):
    return Path(config.checkpoint_dir) / f"cell_{cell.label}.json"


def _save_checkpoint(path, fingerprint, results):
    rows = [{"method": r.method, "rmse": r.rmse, "rmse_se": r.rmse_se, "coverage": r.coverage,
             "coverage_se": r.coverage_se, "seconds": r.seconds, "n_failed": r.n_failed,
             "n_reps": r.n_reps} for r in results]
    tmp = path.with_suffix(".tmp")
    tmp.write_text(json.dumps({"config": fingerprint, "results": rows}))
    tmp.replace(path)


def _load_checkpoint(path, fingerprint, cell):
    try:
        data = json.loads(path.read_text())
    except (OSError, ValueError):
        return None
    if data.get("config") != fingerprint:
        return None
    return [CellResult(cell=cell, **row) for row in data["results"]]


def _run_cell_job(args):
    cell, methods, config = args
    return run_cell(cell, methods, config)


def run_sweep(cells, methods=METHODS, config: SweepConfig | None = None) -> list[CellResult]:
    """Run every cell, reusing checkpoints and distributing cells over processes.

    Results come back in the order of ``cells`` whatever the number of
    workers, and each cell's random streams depend only on its parameter
    values and ``config.seed``.
    """
    config = config or SweepConfig()
    cells = list(cells)
    fingerprint = config.fingerprint(methods)
    done: dict[int, list[CellResult]] = {}
    if config.checkpoint_dir:
        Path(config.checkpoint_dir).mkdir(parents=True, exist_ok=True)
        for i, cell in enumerate(cells):
            res = _load_checkpoint(_checkpoint_path(config, cell), fingerprint, cell)
            if res is not None:
                done[i] = res
    todo = [i for i in range(len(cells)) if i not in done]

    def finish(i, res):
        done[i] = res
        if config.checkpoint_dir:
            _save_checkpoint(_checkpoint_path(config, cells[i]), fingerprint, res)

    if config.workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            for i, res in zip(todo, pool.map(_run_cell_job, [(cells[i], methods, config) for i in todo])):
                finish(i, res)
    else:
        for i in todo:
            finish(i, run_cell(cells[i], methods, config))
    return [r for i in range(len(cells)) for r in done[i]]


def _fmt(x) -> str:
    return "" if x is None or (isinstance(x, float) and np.isnan(x)) else repr(float(x))


def sweep_rows(results, timing: bool = False) -> list[list[str]]:
    """CSV rows; ``seconds`` is left blank unless ``timing`` so output is reproducible."""
    rows = []
    for r in results:
        c = r.cell
        rows.append([repr(c.tau2), repr(c.beta), repr(c.sigma2_x), repr(c.sigma2_u),
                     str(int(c.params_known)), r.method, _fmt(r.rmse), _fmt(r.rmse_se),
                     _fmt(r.coverage), _fmt(r.coverage_se),
                     f"{r.seconds:.3f}" if timing else "", str(r.n_failed)])
    return rows
