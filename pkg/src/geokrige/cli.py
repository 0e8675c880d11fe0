"""Command-line front end: simulate, krige, fit, hmc, sweep, geo.

Every output file starts with a header recording the version, the seed
and the resolved configuration.  Exit codes: 0 success, 1 numerical
failure, 2 input error.  Worker counts never change results.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .estimation import FitError, fit_mple, godambe
from .geo import (DEFAULT_SIGMA2_U, GeoInputError, geo_interpolate, grid_centers, load_geo_csv)
from .gp_core import SingularMatrixError
from .kernels import SQEXP, ErrorModel, KernelSpec, build_cov_matrices
from .kriging import kale_krige, kile_krige
from .sampler import HMCConfig, run_hmc
from .simstudy import (CSV_COLUMNS, SweepCell, SweepConfig, make_design, rep_generator, run_sweep,
                       simulate_rep, sweep_rows, table1_cells)

log = logging.getLogger("geokrige")

EXIT_OK, EXIT_NUMERIC, EXIT_INPUT = 0, 1, 2
# not echoed in headers: they must not change the bytes of primary outputs
UNECHOED = {"threads", "out", "config", "draws_out", "diagnostics_out", "summary", "checkpoint_dir",
            "timing", "verbose", "func", "command"}


class InputError(ValueError):
    pass


# ----------------------------------------------------------------------
# helpers


def _fmt(x) -> str:
    x = float(x)
    return "" if np.isnan(x) else repr(x)


def _header(args, extra_lines=()) -> str:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in UNECHOED}
    lines = [f"# geokrige {__version__}", f"# command: {args.command}", f"# seed: {args.seed}",
             "# config: " + " ".join(f"{k}={v}" for k, v in cfg.items())]
    lines.extend(f"# {s}" for s in extra_lines)
    return "\n".join(lines) + "\n"


def _json_header(args) -> dict:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in UNECHOED}
    return {"version": __version__, "command": args.command, "seed": args.seed, "config": cfg}


def _write(path, text: str):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def _csv_text(header: str, columns, rows) -> str:
    buf = io.StringIO()
    buf.write(header)
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    w.writerows(rows)
    return buf.getvalue()


def _json_text(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False, default=_json_default) + "\n"


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


def read_config(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment; keys use flag names."""
    out = {}
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc}") from None
    for k, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{k}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.lstrip("-").replace("-", "_")] = val
    return out


def read_dataset(path):
    """Read a dataset CSV with columns ``kind,x1..xp,y``; ``#`` lines are skipped.

    Returns ``(obs, y, targets)``.
    """
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from None
    rows = [(k, r) for k, r in enumerate(csv.reader(io.StringIO(text)), start=1)
            if r and not r[0].startswith("#")]
    if not rows:
        raise InputError(f"{path}: no header")
    hline, header = rows[0]
    xcols = [i for i, h in enumerate(header) if h.startswith("x") and h[1:].isdigit()]
    if not header or header[0] != "kind" or not xcols or "y" not in header:
        raise InputError(f"{path}:{hline}: expected header kind,x1..xp,y")
    yi = header.index("y")
    obs, y, tg = [], [], []
    for k, r in rows[1:]:
        if len(r) != len(header):
            raise InputError(f"{path}:{k}: expected {len(header)} fields, got {len(r)}")
        try:
            x = [float(r[i]) for i in xcols]
        except ValueError:
            raise InputError(f"{path}:{k}: malformed coordinate") from None
        if not np.all(np.isfinite(x)):
            raise InputError(f"{path}:{k}: non-finite coordinate")
        if r[0] == "obs":
            try:
                v = float(r[yi])
            except ValueError:
                raise InputError(f"{path}:{k}: malformed value {r[yi]!r}") from None
            if not np.isfinite(v):
                raise InputError(f"{path}:{k}: non-finite value")
            obs.append(x)
            y.append(v)
        elif r[0] == "target":
            tg.append(x)
        else:
            raise InputError(f"{path}:{k}: kind must be obs or target, got {r[0]!r}")
    if not obs:
        raise InputError(f"{path}: no observations")
    p = len(xcols)
    return np.array(obs), np.array(y), np.array(tg).reshape(-1, p)


def _spec(args, require=("beta",)) -> KernelSpec:
    for name in require:
        if getattr(args, name) is None:
            raise InputError(f"--{name.replace('_', '-')} is required")
    return KernelSpec(float(args.tau2), float(args.beta), float(args.sigma2_x), SQEXP)


def _err(args, p: int) -> ErrorModel:
    s2u = float(args.sigma2_u)
    return ErrorModel("iid-gaussian" if s2u > 0 else "none", s2u, p)


# ----------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cell = SweepCell(float(args.beta), float(args.sigma2_x), float(args.sigma2_u), float(args.tau2))
    design = make_design(args.design_seed)
    rep = simulate_rep(cell, design, rep_generator(cell, args.seed, 0))
    p = design.obs.shape[1]
    cols = ["kind"] + [f"x{i + 1}" for i in range(p)] + ["y"]
    if args.with_truth:
        cols += [f"u{i + 1}" for i in range(p)] + ["cond_mean", "cond_var"]
    rows = []
    for i, s in enumerate(design.obs):
        row = ["obs", *(_fmt(v) for v in s), _fmt(rep.y[i])]
        if args.with_truth:
            row += [*(_fmt(v) for v in rep.u[i]), "", ""]
        rows.append(row)
    for j, s in enumerate(design.targets):
        row = ["target", *(_fmt(v) for v in s), ""]
        if args.with_truth:
            row += [""] * p + [_fmt(rep.cond_mean[j]), _fmt(rep.cond_var[j])]
        rows.append(row)
    _write(args.out, _csv_text(_header(args), cols, rows))
    return EXIT_OK


def cmd_krige(args) -> int:
    obs, y, targets = read_dataset(args.data)
    if len(targets) == 0:
        raise InputError(f"{args.data}: no target rows")
    spec = _spec(args)
    err = _err(args, obs.shape[1])
    alpha = float(args.alpha) if args.intervals else None
    cov = build_cov_matrices(spec, err, obs, targets, n_mc=args.n_mc, seed=args.seed)
    if args.method == "kale":
        res = kale_krige(spec, err, obs, y, targets, alpha, cdf_draws=args.cdf_draws, seed=args.seed, cov=cov)
        var = res.mse
    else:
        res = kile_krige(spec, err, obs, y, targets, alpha, seed=args.seed, cov=cov)
        var = res.naive_var
    p = obs.shape[1]
    cols = [f"x{i + 1}" for i in range(p)] + ["mean", "mse", "var"]
    if alpha is not None:
        cols += ["lo", "hi"]
    rows = []
    for j, s in enumerate(targets):
        row = [*(_fmt(v) for v in s), _fmt(res.mean[j]), _fmt(res.mse[j]), _fmt(var[j])]
        if alpha is not None:
            row += [_fmt(res.interval[j, 0]), _fmt(res.interval[j, 1])]
        rows.append(row)
    _write(args.out, _csv_text(_header(args), cols, rows))
    return EXIT_OK


def cmd_fit(args) -> int:
    obs, y, _ = read_dataset(args.data)
    err = _err(args, obs.shape[1])
    fit = fit_mple(err, obs, y, n_restarts=args.restarts, seed=args.seed, n_mc=args.n_mc)
    out = {"header": _json_header(args), "tau2": fit.theta_hat[0], "beta": fit.theta_hat[1],
           "sigma2_x": fit.theta_hat[2], "log_pseudolik": fit.log_pseudolik,
           "converged": fit.converged}
    if args.godambe:
        g = godambe(fit.theta_hat, err, obs, n_mc_outer=args.godambe_draws, seed=args.seed, n_mc=args.n_mc)
        out["godambe"] = {"params": list(g.params), "G": g.G, "H": g.H, "I": g.I_godambe,
                          "pinv_used": g.pinv_used}
    _write(args.out, _json_text(out))
    return EXIT_OK


def cmd_hmc(args) -> int:
    obs, y, targets = read_dataset(args.data)
    if len(targets) == 0:
        raise InputError(f"{args.data}: no target rows")
    sample = ("tau2", "beta", "sigma2_x") if args.sample_theta else ()
    spec = _spec(args, require=() if sample else ("beta",))
    err = _err(args, obs.shape[1])
    cfg = HMCConfig(n_chains=args.chains, n_warmup=args.warmup, n_draws=args.draws,
                    n_leapfrog=args.leapfrog, kappa=float(args.kappa), alpha=float(args.alpha),
                    seed=args.seed)
    theta = {} if sample else spec
    s = run_hmc(None, SQEXP, obs, y, targets, cfg, err=err, theta=theta, sample=sample,
                keep_draws=bool(args.draws_out))
    p = obs.shape[1]
    cols = [f"x{i + 1}" for i in range(p)] + ["mean", "var", "lo", "hi"]
    rows = [[*(_fmt(v) for v in t), _fmt(s.mean[j]), _fmt(s.pred_var[j]),
             _fmt(s.interval[j, 0]), _fmt(s.interval[j, 1])] for j, t in enumerate(targets)]
    _write(args.out, _csv_text(_header(args), cols, rows))
    diag = {"header": _json_header(args), "acceptance_rate": s.acceptance_rate,
            "divergences": s.divergences, "max_rhat": s.max_rhat, "min_ess": s.min_ess,
            "rhat": {k: np.atleast_1d(v).ravel() for k, v in s.rhat.items()},
            "ess": {k: np.atleast_1d(v).ravel() for k, v in s.ess.items()},
            "weights_ess": s.weights_ess, "theta_mean": s.theta_mean, "warnings": s.warnings}
    if args.diagnostics_out:
        _write(args.diagnostics_out, _json_text(diag))
    if args.draws_out and s.draws is not None:
        pred = s.draws["pred"]
        nc, N, m = pred.shape
        lw = s.draws["log_weights"]
        dcols = ["chain", "draw"] + [f"pred{j + 1}" for j in range(m)] + ["log_weight"]
        drows = [[str(c), str(k), *(_fmt(v) for v in pred[c, k]),
                  _fmt(0.0 if lw is None else lw[c, k])] for c in range(nc) for k in range(N)]
        _write(args.draws_out, _csv_text(_header(args), dcols, drows))
    return EXIT_OK


def parse_cells(text: str | None, params_known: bool) -> list[SweepCell]:
    """Filter the default grid, e.g. ``"beta=0.1,2;sigma2_u=1"``."""
    cells = table1_cells(params_known)
    if not text:
        return cells
    keep = {}
    for part in text.split(";"):
        part = part.strip()
        if not part:
            continue
        if "=" not in part:
            raise InputError(f"bad --cells clause {part!r}; expected name=v1,v2")
        name, vals = part.split("=", 1)
        name = name.strip().replace("-", "_")
        if name not in ("beta", "sigma2_x", "sigma2_u"):
            raise InputError(f"unknown cell parameter {name!r}")
        try:
            keep[name] = {float(v) for v in vals.split(",") if v.strip()}
        except ValueError:
            raise InputError(f"bad number in --cells clause {part!r}") from None
    out = [c for c in cells if all(getattr(c, k) in v for k, v in keep.items())]
    if not out:
        raise InputError("--cells filter selects no cells")
    return out


def cmd_sweep(args) -> int:
    cells = parse_cells(args.cells, not args.estimated)
    methods = tuple(m.strip().upper() for m in args.methods.split(",") if m.strip())
    bad = set(methods) - {"KALE", "KILE", "HMC"}
    if bad:
        raise InputError(f"unknown methods {sorted(bad)}")
    hmc = HMCConfig(n_chains=args.chains, n_warmup=args.warmup, n_draws=args.draws,
                    n_leapfrog=args.leapfrog)
    cfg = SweepConfig(n_reps=args.reps, seed=args.seed, design_seed=args.design_seed,
                      alpha=float(args.alpha), hmc=hmc, checkpoint_dir=args.checkpoint_dir,
                      workers=max(1, int(args.threads)), timing=args.timing,
                      n_restarts=args.restarts)
    results = run_sweep(cells, methods, cfg)
    _write(args.out, _csv_text(_header(args), CSV_COLUMNS, sweep_rows(results, args.timing)))
    return EXIT_OK


def cmd_geo(args) -> int:
    data = load_geo_csv(args.data, center=args.center)
    if args.targets:
        t = load_geo_csv(args.targets) if _has_value_column(args.targets) else _read_lonlat(args.targets)
        targets = t if isinstance(t, np.ndarray) else t.sites
    else:
        lo = (np.floor(data.lon.min() / 5) * 5, np.ceil(data.lon.max() / 5) * 5)
        la = (np.floor(data.lat.min() / 5) * 5, np.ceil(data.lat.max() / 5) * 5)
        grid = grid_centers(lo, la)
        seen = {(float(a), float(b)) for a, b in data.sites}
        targets = np.array([g for g in grid if (float(g[0]), float(g[1])) not in seen]).reshape(-1, 2)
    if len(targets) == 0:
        raise InputError("no target grid cells")
    hmc = HMCConfig(n_chains=args.chains, n_warmup=args.warmup, n_draws=args.draws,
                    n_leapfrog=args.leapfrog, seed=args.seed, alpha=float(args.alpha))
    pred = geo_interpolate(data, targets, float(args.sigma2_u), args.mode, n_mc=args.n_mc,
                           n_restarts=args.restarts, seed=args.seed, alpha=float(args.alpha), hmc=hmc)
    rows = [[_fmt(t[0]), _fmt(t[1]), _fmt(pred.mean[j]), _fmt(pred.var[j]),
             _fmt(pred.interval[j, 0]), _fmt(pred.interval[j, 1])] for j, t in enumerate(targets)]
    _write(args.out, _csv_text(_header(args), ["lon", "lat", "mean", "var", "lo95", "hi95"], rows))
    if args.summary:
        summ = pred.summary()
        if not args.timing:
            summ["runtime_s"] = None
        _write(args.summary, _json_text({"header": _json_header(args), **summ,
                                         "diagnostics": pred.diagnostics}))
    return EXIT_OK


def _has_value_column(path) -> bool:
    with open(path, encoding="utf-8") as fh:
        return "value" in fh.readline()


def _read_lonlat(path) -> np.ndarray:
    rows = list(csv.reader(open(path, encoding="utf-8")))
    if not rows or [h.strip() for h in rows[0]][:2] != ["lon", "lat"]:
        raise GeoInputError(f"{path}:1: expected header lon,lat")
    out = []
    for k, r in enumerate(rows[1:], start=2):
        if not r:
            continue
        try:
            a, b = float(r[0]), float(r[1])
        except (ValueError, IndexError):
            raise GeoInputError(f"{path}:{k}: malformed row") from None
        if not (-180 <= a <= 180 and -90 <= b <= 90):
            raise GeoInputError(f"{path}:{k}: coordinate out of bounds")
        out.append((a, b))
    return np.array(out).reshape(-1, 2)


# ----------------------------------------------------------------------
# parser


def _common(p):
    p.add_argument("--seed", type=int, help="random seed (falls back to $GEOKRIGE_SEED, then 0)")
    p.add_argument("--threads", type=int, default=1, help="worker processes; never changes results")
    p.add_argument("--config", help="key=value file; command-line flags take precedence")
    p.add_argument("--out", default="-", help="primary output path (default stdout)")
    p.add_argument("-v", "--verbose", action="store_true")


def _theta(p, beta_default=None):
    p.add_argument("--tau2", type=float, default=1.0)
    p.add_argument("--beta", type=float, default=beta_default)
    p.add_argument("--sigma2-x", dest="sigma2_x", type=float, default=0.0)
    p.add_argument("--sigma2-u", dest="sigma2_u", type=float, default=0.0)
    p.add_argument("--alpha", type=float, default=0.05)


def _hmc_flags(p, chains=4, warmup=1000, draws=2000):
    p.add_argument("--chains", type=int, default=chains)
    p.add_argument("--warmup", type=int, default=warmup)
    p.add_argument("--draws", type=int, default=draws)
    p.add_argument("--leapfrog", type=int, default=16)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="geokrige", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"geokrige {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate one dataset on the grid design")
    _common(p)
    _theta(p)
    p.add_argument("--design-seed", type=int, default=0)
    p.add_argument("--with-truth", action="store_true", help="also write u and target conditionals")
    p.set_defaults(func=cmd_simulate, required=("beta",))

    p = sub.add_parser("krige", help="KALE or KILE predictions")
    _common(p)
    _theta(p)
    p.add_argument("--data", required=True)
    p.add_argument("--method", choices=("kale", "kile"), default="kale")
    p.add_argument("--intervals", action="store_true")
    p.add_argument("--n-mc", type=int, default=4096)
    p.add_argument("--cdf-draws", type=int, default=2000)
    p.set_defaults(func=cmd_krige, required=("beta",))

    p = sub.add_parser("fit", help="maximum pseudo-likelihood estimates")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--sigma2-u", dest="sigma2_u", type=float, default=0.0)
    p.add_argument("--restarts", type=int, default=8)
    p.add_argument("--n-mc", type=int, default=4096)
    p.add_argument("--godambe", action="store_true")
    p.add_argument("--godambe-draws", type=int, default=2000)
    p.set_defaults(func=cmd_fit, required=())

    p = sub.add_parser("hmc", help="posterior predictions by HMC over location errors")
    _common(p)
    _theta(p)
    _hmc_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--sample-theta", action="store_true", help="sample tau2, beta, sigma2_x too")
    p.add_argument("--kappa", type=float, default=0.0, help="inflated nugget for importance reweighting")
    p.add_argument("--draws-out")
    p.add_argument("--diagnostics-out")
    p.set_defaults(func=cmd_hmc, required=())

    p = sub.add_parser("sweep", help="simulation study over the parameter grid")
    _common(p)
    _hmc_flags(p, chains=2)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--cells", help='filter, e.g. "beta=0.1,2;sigma2_u=1"')
    p.add_argument("--estimated", action="store_true", help="estimate parameters instead of using truth")
    p.add_argument("--methods", default="KALE,KILE,HMC")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--restarts", type=int, default=8)
    p.add_argument("--design-seed", type=int, default=0)
    p.add_argument("--checkpoint-dir")
    p.add_argument("--timing", action="store_true", help="fill the seconds column")
    p.set_defaults(func=cmd_sweep, required=())

    p = sub.add_parser("geo", help="interpolate gridded anomalies on the sphere")
    _common(p)
    _hmc_flags(p)
    p.add_argument("--data", required=True)
    p.add_argument("--targets", help="CSV with lon,lat; default: empty cells of the 5 degree grid")
    p.add_argument("--mode", choices=("KALE", "KILE", "HMC"), default="KALE", type=str.upper)
    p.add_argument("--sigma2-u", dest="sigma2_u", type=float, default=DEFAULT_SIGMA2_U)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--center", action="store_true", help="subtract the mean value before fitting")
    p.add_argument("--n-mc", type=int, default=1024)
    p.add_argument("--restarts", type=int, default=8)
    p.add_argument("--summary", help="parameter summary JSON path")
    p.add_argument("--timing", action="store_true", help="record runtime in the summary")
    p.set_defaults(func=cmd_geo, required=())
    return parser


def _apply_config(parser, argv):
    """Parse twice: config-file values become defaults, so flags still win."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    conf = read_config(args.config)
    subparser = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in subparser._actions}
    for key, val in conf.items():
        if key not in known or key in ("config", "help"):
            raise InputError(f"{args.config}: unknown key {key!r}")
        act = known[key]
        if act.const is not None and act.nargs == 0:  # store_true
            conf[key] = val.lower() in ("1", "true", "yes", "on")
        elif act.type is not None:
            try:
                conf[key] = act.type(val)
            except ValueError:
                raise InputError(f"{args.config}: bad value for {key}: {val!r}") from None
    subparser.set_defaults(**conf)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except InputError as exc:
        print(f"geokrige: error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.seed is None:
        env = os.environ.get("GEOKRIGE_SEED")
        try:
            args.seed = int(env) if env is not None else 0
        except ValueError:
            print(f"geokrige: error: GEOKRIGE_SEED={env!r} is not an integer", file=sys.stderr)
            return EXIT_INPUT
    for name in args.required:
        if getattr(args, name, None) is None:
            print(parser._subparsers._group_actions[0].choices[args.command].format_usage(),
                  file=sys.stderr, end="")
            print(f"geokrige {args.command}: error: --{name.replace('_', '-')} is required",
                  file=sys.stderr)
            return EXIT_INPUT
    del args.required
    try:
        return args.func(args)
    except (SingularMatrixError, FitError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"geokrige: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, GeoInputError, ValueError, OSError) as exc:
        print(f"geokrige: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
