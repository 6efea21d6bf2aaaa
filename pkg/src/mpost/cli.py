"""Command line entry point.

Subcommands: sample, coverage, check, prequential, kde.  Any flag may also
come from a flat TOML file given with ``--config`` (keys are flag names with
dashes or underscores); flags on the command line win.  Failures print one
line ``mpost: error category=<Category> kind=<Exception>: <message>`` on
stderr and exit with 2 (usage), 3 (data), 4 (model) or 5 (numerical).  The
``check`` subcommand exits 1 when a diagnostic fails.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .diagnostics import prequential_loglik, run_checks
from .errors import MPostError
from .estimators import METHODS, EstimatorSpec, estimate
from .io import load_iid, load_regression, read_table, write_csv
from .models import FAMILIES, make_family
from .regression import REGRESSION_FAMILIES, DesignMatrix, make_regression
from .resampler import MODES, ResampleConfig, batch_sample
from .stats import (Scenario, coverage_experiment, density_level, kde, kde2d,
                    silverman_bandwidth)

try:
    import tomllib
except ModuleNotFoundError:          # Python < 3.11
    import tomli as tomllib

EXIT_CODES = {"UsageError": 2, "DataError": 3, "ModelError": 4, "NumericalError": 5}
ALL_MODELS = FAMILIES + REGRESSION_FAMILIES


class UsageError(Exception):
    category = "UsageError"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(category, kind, message):
    message = " ".join(str(message).split())
    print(f"mpost: error category={category} kind={kind}: {message}", file=sys.stderr)
    return EXIT_CODES[category]


def _floats(text):
    if isinstance(text, (list, tuple)):
        return [float(v) for v in text]
    return [float(v) for v in str(text).replace(";", ",").split(",") if v.strip()]


# ---- parser ---------------------------------------------------------------------

def _model_flags(p):
    p.add_argument("--model", choices=ALL_MODELS, help="model family")
    p.add_argument("--data", help="input CSV (response column 'y')")
    p.add_argument("--nu", type=float, default=5.0, help="t degrees of freedom (default 5)")
    p.add_argument("--sigma2", type=float, default=1.0,
                   help="known variance for normal_mean (default 1)")
    p.add_argument("--kappa", type=float, default=1e-3,
                   help="logistic Fisher truncation (default 0.001)")
    p.add_argument("--no-intercept", action="store_true",
                   help="do not add a leading column of ones to the design")
    p.add_argument("--standardize", action="store_true",
                   help="center and scale non-binary covariates and the response")


def _common(p):
    p.add_argument("--config", help="flat TOML file supplying flag defaults")
    p.add_argument("--threads", type=int, default=1,
                   help="worker threads; never changes results (default 1)")


def build_parser():
    parser = _Parser(prog="mpost", description="Parametric martingale posteriors.")
    parser.add_argument("--version", action="version", version=f"mpost {__version__}")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("sample", help="draw from the martingale posterior")
    _common(s)
    _model_flags(s)
    s.add_argument("--mode", choices=MODES, default="hybrid")
    s.add_argument("--trunc-extra", type=int, default=None,
                   help="imputed points before truncation, trunc_N = n + M "
                        "(default 100 per parameter)")
    s.add_argument("--exact-extra", type=int, default=20000,
                   help="imputed points for mode exact (default 20000)")
    s.add_argument("--draws", type=int, default=1000, help="posterior draws B")
    s.add_argument("--seed", type=int, help="master seed (required)")
    s.add_argument("--temper", default="1",
                   help="learning-rate factor a, or a matrix as 'r11,r12;r21,r22'")
    s.add_argument("--estimator", choices=METHODS, default=None,
                   help="initial estimate method (default per family)")
    s.add_argument("--theta0", default=None, help="start for sgd_onepass, comma separated")
    s.add_argument("--out", help="draws CSV path (required)")
    s.add_argument("--meta", help="metadata JSON path (default <out>.json)")

    c = sub.add_parser("coverage", help="frequentist coverage of credible intervals")
    _common(c)
    c.add_argument("--model", choices=FAMILIES)
    c.add_argument("--theta-star", help="true parameter, comma separated")
    c.add_argument("--n", type=int)
    c.add_argument("--repeats", type=int, default=1000)
    c.add_argument("--draws", type=int, default=2000)
    c.add_argument("--mode", choices=MODES, default="hybrid")
    c.add_argument("--trunc-extra", type=int, default=None)
    c.add_argument("--temper", type=float, default=1.0)
    c.add_argument("--level", type=float, default=0.95)
    c.add_argument("--seed", type=int)
    c.add_argument("--nu", type=float, default=5.0)
    c.add_argument("--sigma2", type=float, default=1.0)
    c.add_argument("--estimator", choices=METHODS, default=None)
    c.add_argument("--out", help="coverage CSV path (required)")
    c.add_argument("--meta", help="metadata JSON path (default <out>.json)")

    k = sub.add_parser("check", help="assumption diagnostics for a family")
    _common(k)
    _model_flags(k)
    k.add_argument("--grid", help="parameter grid, points separated by ';'")
    k.add_argument("--mc-n", type=int, default=100_000)
    k.add_argument("--seed", type=int, default=0)
    k.add_argument("--dim", type=int, default=2, help="mvnormal dimension without data")
    k.add_argument("--out", help="JSON report path")

    q = sub.add_parser("prequential", help="prequential log-likelihood over a grid")
    _common(q)
    _model_flags(q)
    q.add_argument("--grid", required=False, help="hyperparameter values, comma separated")
    q.add_argument("--burn-in", type=int, default=None,
                   help="points used for the starting estimate (default 10 per parameter)")
    q.add_argument("--theta0", default=None, help="fixed start instead of a burn-in fit")
    q.add_argument("--out", help="CSV path (value, loglik)")

    d = sub.add_parser("kde", help="kernel density of posterior draws")
    _common(d)
    d.add_argument("--input", help="draws CSV")
    d.add_argument("--param", help="column name, or two names 'a,b' for a 2-d grid")
    d.add_argument("--points", type=int, default=512)
    d.add_argument("--level", type=float, default=0.95,
                   help="mass enclosed by the reported 2-d density contour")
    d.add_argument("--out", help="CSV path")
    return parser


def _apply_config(parser, argv):
    """Parse twice so a --config file can supply defaults."""
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("a subcommand is required: sample, coverage, check, "
                         "prequential or kde")
    if not getattr(args, "config", None):
        return args
    try:
        with open(args.config, "rb") as fh:
            conf = tomllib.load(fh)
    except OSError as e:
        raise UsageError(f"cannot read config {args.config}: {e.strerror}") from None
    except tomllib.TOMLDecodeError as e:
        raise UsageError(f"bad config {args.config}: {e}") from None
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    defaults = {}
    for key, val in conf.items():
        dest = key.replace("-", "_")
        if dest == "family":
            dest = "model"
        if dest not in known or isinstance(val, dict):
            raise UsageError(f"unknown config key {key!r} for {args.command}")
        if isinstance(val, list):
            val = ",".join(str(v) for v in val)
        defaults[dest] = val
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def _need(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required")


# ---- model construction ------------------------------------------------------------

def _load_model(args):
    """Model, responses and the dataset for the data-driven subcommands."""
    name = args.model
    if name in REGRESSION_FAMILIES:
        ds = load_regression(args.data, intercept=not args.no_intercept,
                             standardize=args.standardize,
                             standardize_response=name != "logistic")
        design = DesignMatrix(ds.X, tuple(ds.covariate_names))
        model = make_regression(name, design, nu=args.nu, kappa=args.kappa)
    else:
        ds = load_iid(args.data, multivariate=name == "mvnormal")
        d = ds.y.shape[1] if name == "mvnormal" else None
        model = make_family(name, nu=args.nu, sigma2=args.sigma2, d=d)
    model.check_y(ds.y)
    return model, ds


def _parse_temper(text, dim):
    text = str(text)
    if ";" in text:
        rows = [_floats(r) for r in text.split(";")]
        return np.array(rows)
    return float(text)


def _meta_path(args):
    return args.meta or args.out + ".json"


def _write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(type(o).__name__)


# ---- subcommands --------------------------------------------------------------------

def cmd_sample(args, argv):
    _need(args, "model", "data", "seed", "out")
    if args.draws < 1:
        raise UsageError("--draws must be positive")
    model, ds = _load_model(args)
    theta0 = None if args.theta0 is None else np.array(_floats(args.theta0))
    spec = EstimatorSpec(args.estimator, theta0=theta0, seed=args.seed)
    theta_n = estimate(model, ds.y, spec)
    n = ds.n
    trunc = None if args.trunc_extra is None else n + args.trunc_extra
    cfg = ResampleConfig(args.mode, trunc, args.draws, _parse_temper(args.temper, model.dim),
                         args.seed, n + args.exact_extra)
    post = batch_sample(model, theta_n, n, cfg, threads=args.threads)
    post.to_csv(args.out)
    post.write_metadata(_meta_path(args), {
        "argv": list(argv), "version": __version__, "model": repr(model),
        "estimator": spec.method or "default", "standardization": ds.standardization,
        "covariates": ds.covariate_names})
    return 0


def cmd_coverage(args, argv):
    _need(args, "model", "theta_star", "n", "seed", "out")
    sc = Scenario(args.model, _floats(args.theta_star), args.n, args.repeats, args.draws,
                  args.mode, args.trunc_extra, args.temper, args.level, args.seed,
                  args.nu, args.sigma2, args.estimator)
    res = coverage_experiment(sc, threads=args.threads)
    res.to_csv(args.out)
    _write_json(_meta_path(args), {**res.metadata(), "argv": list(argv),
                                   "version": __version__})
    return 0


def cmd_check(args, argv):
    _need(args, "model")
    if args.data:
        model, _ = _load_model(args)
    elif args.model in REGRESSION_FAMILIES:
        raise UsageError("regression diagnostics need --data for the design")
    else:
        model = make_family(args.model, nu=args.nu, sigma2=args.sigma2, d=args.dim)
    grid = None
    if args.grid:
        grid = np.array([_floats(pt) for pt in args.grid.split(";")])
    rep = run_checks(model, grid, args.mc_n, args.seed)
    print(rep.text())
    if args.out:
        _write_json(args.out, {**rep.to_dict(), "argv": list(argv)})
    return 0 if rep.passed else 1


HYPER = {"student_t": "nu", "robust_t": "nu", "normal_mean": "sigma2", "logistic": "kappa"}


def cmd_prequential(args, argv):
    _need(args, "model", "data", "grid", "out")
    if args.model not in HYPER:
        raise UsageError(f"{args.model} has no hyperparameter to select")
    key = HYPER[args.model]
    model, ds = _load_model(args)
    grid = _floats(args.grid)

    def make(v):
        if model.conditional:
            return make_regression(args.model, model.design,
                                   **{k: (v if k == key else getattr(args, k))
                                      for k in ("nu", "kappa")})
        return make_family(args.model, **{k: (v if k == key else getattr(args, k))
                                          for k in ("nu", "sigma2")})

    x = model.design.rows if model.conditional else None
    if args.theta0 is not None:
        table = prequential_loglik(make, ds.y, grid, theta0=_floats(args.theta0), x=x)
    else:
        m = 10 * model.dim if args.burn_in is None else args.burn_in
        if not 0 < m < ds.n:
            raise UsageError("--burn-in must lie between 1 and n - 1")
        table = _prequential_burn(make, ds.y, grid, x, m)
    write_csv(args.out, ["value", "loglik"], [(r["value"], r["loglik"]) for r in table.rows()])
    best = table.grid[int(table.best[0])]
    print(f"best {key} = {best:g}")
    return 0


def _prequential_burn(make, y, grid, x, m):
    """Burn-in fit on the first m points; regression fits use those design rows."""
    def fit(fam, yb):
        if fam.conditional:
            sub = type(fam).__new__(type(fam))
            sub.__dict__.update(fam.__dict__)
            sub.design = DesignMatrix(fam.design.rows[:m], fam.design.names)
            return estimate(sub, yb)
        return estimate(fam, yb)
    return prequential_loglik(make, y, grid, x=x, burn_in=m, estimator=fit)


def cmd_kde(args, argv):
    _need(args, "input", "param", "out")
    header, data = read_table(args.input)
    names = [s.strip() for s in args.param.split(",")]
    for nm in names:
        if nm not in header:
            raise UsageError(f"column {nm!r} not in {args.input}")
    cols = data[:, [header.index(nm) for nm in names]]
    if len(names) == 1:
        x = cols[:, 0]
        sd = float(np.std(x, ddof=1)) if x.size > 1 else 0.0
        silverman_bandwidth(x)      # validates draw count and spread
        grid = np.linspace(x.mean() - 6 * sd, x.mean() + 6 * sd, args.points)
        write_csv(args.out, ["grid", "density"], zip(grid, kde(x, grid)))
        return 0
    if len(names) != 2:
        raise UsageError("--param takes one or two column names")
    gs = []
    for j in range(2):
        c = cols[:, j]
        sd = float(np.std(c, ddof=1))
        gs.append(np.linspace(c.mean() - 4 * sd, c.mean() + 4 * sd, args.points))
    dens = kde2d(cols, gs[0], gs[1])
    gx, gy = np.meshgrid(gs[0], gs[1], indexing="ij")
    write_csv(args.out, [names[0], names[1], "density"],
              zip(gx.ravel(), gy.ravel(), dens.ravel()))
    level = density_level(cols, args.level)
    _write_json(args.out + ".json", {"argv": list(argv), "level": args.level,
                                     "density_threshold": level})
    return 0


COMMANDS = {"sample": cmd_sample, "coverage": cmd_coverage, "check": cmd_check,
            "prequential": cmd_prequential, "kde": cmd_kde}


def run(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
        if getattr(args, "threads", 1) < 1:
            raise UsageError("--threads must be at least 1")
        return COMMANDS[args.command](args, argv)
    except UsageError as e:
        return _fail("UsageError", "UsageError", e)
    except MPostError as e:
        return _fail(e.category, type(e).__name__, e)
    except ValueError as e:
        return _fail("UsageError", type(e).__name__, e)
    except np.linalg.LinAlgError as e:
        return _fail("NumericalError", "LinAlgError", e)


def main():
    sys.exit(run())
