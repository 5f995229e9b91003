"""``tau-kit`` command-line front end.

Each subcommand loads data, runs the pipeline and writes its artifacts into
``--out``.  Failures print a one-line JSON error on stderr and exit with
2 (configuration), 3 (data) or 4 (numerically degenerate).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from dataclasses import asdict, fields
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__, errors
from . import bands as B
from . import estimators as E
from . import inference as I
from . import model as M
from . import pairing as P
from . import plotting, synth

RESULT_SCHEMA = "result.schema.json"


def load_schema():
    return json.loads(resources.files("taukit").joinpath("schemas", RESULT_SCHEMA).read_text("utf-8"))


# ---------------------------------------------------------------- arguments

def _common(p, data=True):
    p.add_argument("--out", default=".", help="output directory (created if missing)")
    p.add_argument("--format", choices=("json", "csv", "both"), default="both")
    p.add_argument("--seed", type=int, default=None, help="RNG seed (falls back to $TAUKIT_SEED, then 0)")
    p.add_argument("--workers", type=int, default=1)
    if data:
        p.add_argument("--cases", help="cases CSV: id,x,y,t,status[,marks]")
        p.add_argument("--episodes", help="episodes CSV (rate estimator)")
        p.add_argument("--persons", help="persons CSV (rate estimator)")
        p.add_argument("--relocations", help="relocations CSV (rate estimator)")
        p.add_argument("--crs", choices=(M.PLANAR, M.GEOGRAPHIC), default=M.PLANAR)
        p.add_argument("--infectious-window", default=None,
                       help="'recovery' or 'fixed:L' (rate estimator)")
        p.add_argument("--immunizing", action="store_true")
        p.add_argument("--susceptibility-delay", type=float, default=0.0)


def _curve_opts(p, with_R=True, default_R=500):
    p.add_argument("--bands", default="width:auto:10",
                   help="width:D:K | discs:c1,c2,.. | eqcount:K | overlap:c1,c2,..:H")
    p.add_argument("--relate", default="0:5", help="T1:T2[+mark:NAME][+prevalent[:NAME]]")
    p.add_argument("--estimator", choices=(E.ODDS, E.PREV, E.RATE), default=E.ODDS)
    p.add_argument("--inapplicable", choices=("unrelated", "drop"), default="unrelated")
    p.add_argument("--level", type=float, default=0.95)
    p.add_argument("--convention", choices=("band_end", "band_midpoint"), default="band_end")
    p.add_argument("--log-tau", action="store_true")
    p.add_argument("--dump-tallies", action="store_true", help="also write tallies.json")
    if with_R:
        p.add_argument("--R", type=int, default=default_R, help="number of replicates")


def build_parser():
    ap = argparse.ArgumentParser(prog="tau-kit", description="Spatio-temporal tau statistic toolkit")
    ap.add_argument("--version", action="version", version=f"tau-kit {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tau", help="tau curve with an optional bootstrap envelope")
    _common(p)
    _curve_opts(p, default_R=0)

    p = sub.add_parser("range", help="clustering range with bootstrap interval and legacy heuristic")
    _common(p)
    _curve_opts(p)
    p.add_argument("--crossing", choices=("first", "last"), default="first")
    p.add_argument("--legacy-threshold", type=float, default=1.2)

    p = sub.add_parser("test", help="global envelope test against a permutation null")
    _common(p)
    _curve_opts(p, default_R=199)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--method", choices=("erl", "rank"), default="erl")

    p = sub.add_parser("map", help="tau over distance band x time-lag band")
    _common(p)
    p.add_argument("--dbands", required=True)
    p.add_argument("--tbands", required=True)
    p.add_argument("--min-pairs", type=int, default=10)
    p.add_argument("--linear-tau", action="store_true", help="linear rather than log colour scale")

    p = sub.add_parser("simulate", help="write a synthetic cases CSV")
    _common(p, data=False)
    p.add_argument("--kind", choices=("null", "epidemic"), default="epidemic")
    p.add_argument("--n", type=int, default=500, help="case count (null kind)")
    p.add_argument("--config", help="JSON file of epidemic settings")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one epidemic setting (repeatable)")

    p = sub.add_parser("bands", help="preview bands and their pair counts without computing tau")
    _common(p)
    p.add_argument("--bands", default="width:auto:10")
    return ap


# ---------------------------------------------------------------- helpers

def _seed(args):
    if args.seed is not None:
        return args.seed
    env = os.environ.get("TAUKIT_SEED")
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise errors.ConfigError(f"TAUKIT_SEED={env!r} is not an integer") from None


def _load(args, need_time=True):
    """Return the dataset the estimator needs (case dataset or episode panel)."""
    if getattr(args, "estimator", None) == E.RATE:
        if not args.episodes or not args.persons:
            raise errors.ConfigError("the rate estimator needs --episodes and --persons")
        return M.load_episode_panel(args.persons, args.episodes, args.relocations,
                                    immunizing=args.immunizing,
                                    infectious_window=args.infectious_window,
                                    susceptibility_delay=args.susceptibility_delay,
                                    crs_mode=args.crs)
    if not args.cases:
        raise errors.ConfigError("--cases is required")
    return M.load_case_data(args.cases, crs_mode=args.crs)


def _bands(spec, data, axis=B.DISTANCE):
    ds = M.as_case_dataset(data) if isinstance(data, M.EpisodePanel) else data
    return B.parse_band_spec(spec, ds, axis)


def _time_window(rule):
    for leaf in rule.leaves():
        if leaf.kind == M.TEMPORAL:
            return [leaf.t1, leaf.t2]
    return None


def _check_identity(data, rule, args, warn_list):
    """Warn when the single band [0, inf) does not give tau = 1."""
    whole = B.BandSet.whole_line()
    f = I.CurveFactory(data, whole, rule, args.estimator, args.inapplicable)
    v = f.point().values[0]
    if not (isinstance(v, float) and abs(v - 1.0) <= 1e-12):
        msg = f"internal consistency check failed: tau over [0, inf) is {v!r}, expected 1"
        warnings.warn(msg, RuntimeWarning, stacklevel=2)
        warn_list.append(msg)


class Run:
    """Collects artifacts and the result document for one invocation."""

    def __init__(self, args, command):
        self.args = args
        self.out = Path(args.out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.doc = {"tool": "tau-kit", "version": __version__, "command": command,
                    "seed": None, "rng": I.RNG_NAME, "config": {}, "warnings": [], "outputs": []}

    def path(self, name):
        self.doc["outputs"].append(name)
        return self.out / name

    def want_csv(self):
        return self.args.format in ("csv", "both")

    def finish(self):
        self.doc["meta"] = {"seed": self.doc["seed"], "R": int(getattr(self.args, "R", 0) or 0),
                            "rng": I.RNG_NAME, "version": __version__}
        self.doc["outputs"] = sorted(set(self.doc["outputs"] + (["result.json"] if self.args.format != "csv" else [])))
        if self.args.format in ("json", "both"):
            text = json.dumps(self.doc, indent=1, sort_keys=True, allow_nan=False)
            (self.out / "result.json").write_text(text + "\n", encoding="utf-8")
        print(json.dumps({"status": "ok", "command": self.doc["command"], "out": str(self.out),
                          "outputs": self.doc["outputs"]}, sort_keys=True))
        return 0


def _figure_meta(args, rule, R, envelope, level):
    return {"estimator": args.estimator, "R": int(R), "envelope": envelope, "level": level,
            "relatedness": rule.describe(), "title": f"tau ({args.estimator})"}


def _curve_config(args, rule, bands, seed):
    return {"estimator": args.estimator, "bands": args.bands, "band_edges": bands.to_list(),
            "relatedness": rule.to_dict(), "time_window": _time_window(rule),
            "R": getattr(args, "R", 0), "seed": seed, "level": args.level,
            "convention": args.convention, "inapplicable": args.inapplicable}


def _write_curve(run, curve):
    curve = E.TauCurve(curve.estimator, curve.bands, curve.values, curve.reasons, curve.n_related,
                       curve.n_denominator, run.args.convention, curve.meta)
    if run.want_csv():
        curve.write_csv(run.path("curve.csv"))
    run.doc["curve"] = curve.to_dict()
    run.doc["estimator"] = curve.estimator
    run.doc["bands"] = curve.bands.to_list()
    run.doc["tau"] = E._jsonable(curve.values)
    if not curve.defined.any():
        raise errors.DegenerateError("every band is undefined")
    return curve


def _dump_tallies(run, factory):
    if not run.args.dump_tallies:
        return
    if factory.estimator == E.RATE:
        t = P.tally_rate_table(factory.table, factory.bands, binner=factory.binner)
    else:
        t = P.tally_table(factory.table, factory.bands, inapplicable=factory.inapplicable,
                          mode=factory.mode, binner=factory.binner, bins=factory.bins)
    path = run.path("tallies.json")
    path.write_text(json.dumps(t.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8")


def _prepare(args, command):
    run = Run(args, command)
    seed = _seed(args)
    run.doc["seed"] = seed
    rule = M.RelatednessRule.parse(args.relate)
    if args.estimator != E.RATE and args.R < 0:
        raise errors.ConfigError("--R must be non-negative")
    data = _load(args)
    bands = _bands(args.bands, data)
    run.doc["config"] = _curve_config(args, rule, bands, seed)
    _check_identity(data, rule, args, run.doc["warnings"])
    factory = I.CurveFactory(data, bands, rule, args.estimator, args.inapplicable, args.workers)
    _dump_tallies(run, factory)
    return run, seed, rule, data, bands, factory


# ---------------------------------------------------------------- commands

def cmd_tau(args):
    run, seed, rule, data, bands, factory = _prepare(args, "tau")
    curve = _write_curve(run, factory.point())
    series = plotting.CurveSeries(curve, args.estimator)
    envelope_kind = None
    if args.R > 0:
        bundle = I.bootstrap_curves(data, bands, rule, args.estimator, args.R, seed, args.workers, factory)
        env = I.pointwise_envelope(bundle, args.level, min_replicates=1)
        run.doc["envelope"] = dict(env.to_dict(), kind="bootstrap_pointwise", R=bundle.R)
        series = plotting.CurveSeries(curve, args.estimator, env.lo, env.hi, bundle.R)
        envelope_kind = "bootstrap pointwise"
    plotting.plot_curves([series], run.path("curve.svg"), run.path("curve_plot.csv"),
                         _figure_meta(args, rule, args.R, envelope_kind, args.level if args.R else None),
                         log_tau=args.log_tau, convention=args.convention)
    return run.finish()


def cmd_range(args):
    run, seed, rule, data, bands, factory = _prepare(args, "range")
    if args.R < 1:
        raise errors.ConfigError("range needs --R >= 1")
    curve = _write_curve(run, factory.point())
    bundle = I.bootstrap_curves(data, bands, rule, args.estimator, args.R, seed, args.workers, factory)
    env = I.pointwise_envelope(bundle, args.level, min_replicates=1)
    run.doc["envelope"] = dict(env.to_dict(), kind="bootstrap_pointwise", R=bundle.R)
    rng = I.clustering_range(bundle, args.level, args.crossing, args.convention)
    run.doc["range"] = rng.to_dict()
    try:
        legacy = I.legacy_range_azman(curve, env, bundle, args.legacy_threshold, args.convention)
        run.doc["legacy_range"] = legacy.to_dict()
    except errors.NoCrossing as exc:
        run.doc["legacy_range"] = None
        run.doc["warnings"].append(f"legacy range: {exc}")
    if run.want_csv():
        with open(run.path("range_replicates.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write("replicate,D,censored\n")
            for r, (d, c) in enumerate(zip(rng.per_replicate, rng.censored)):
                fh.write(f"{r},{E._fmt(d)},{int(c)}\n")
    plotting.plot_curves([plotting.CurveSeries(curve, args.estimator, env.lo, env.hi, bundle.R)],
                         run.path("curve.svg"), run.path("curve_plot.csv"),
                         _figure_meta(args, rule, bundle.R, "bootstrap pointwise", args.level),
                         log_tau=args.log_tau, convention=args.convention)
    return run.finish()


def cmd_test(args):
    run, seed, rule, data, bands, factory = _prepare(args, "test")
    curve = _write_curve(run, factory.point())
    run.doc["config"]["alpha"] = args.alpha
    null = I.permutation_null_curves(data, bands, rule, args.estimator, args.R, seed, args.workers, factory)
    res = I.global_envelope_test(curve, null, args.alpha, args.method)
    run.doc["global_test"] = dict(res.to_dict(), R=null.R)
    plotting.plot_curves([plotting.CurveSeries(curve, args.estimator, res.global_lo, res.global_hi, null.R)],
                         run.path("curve.svg"), run.path("curve_plot.csv"),
                         _figure_meta(args, rule, null.R, f"global {args.method} (permutation null)",
                                      1 - args.alpha),
                         log_tau=args.log_tau)
    return run.finish()


def cmd_map(args):
    run = Run(args, "map")
    run.doc["seed"] = _seed(args)
    args.estimator = E.ODDS
    data = _load(args)
    dbands = _bands(args.dbands, data)
    tbands = _bands(args.tbands, data, B.TIME)
    tmap = E.tau_spacetime_map(data, dbands, tbands, args.min_pairs)
    run.doc["config"] = {"dbands": args.dbands, "tbands": args.tbands, "min_pairs": args.min_pairs}
    run.doc["map"] = tmap.to_dict()
    if run.want_csv():
        tmap.write_csv(run.path("map.csv"))
    if not np.isfinite(tmap.cells).any():
        raise errors.DegenerateError("every map cell is undefined")
    meta = {"estimator": "odds", "R": 0, "relatedness": "lag band per row", "title": "tau map"}
    plotting.plot_map(tmap, run.path("heatmap.svg"), run.path("heatmap_plot.csv"), meta,
                      log_tau=not args.linear_tau)
    return run.finish()


def _epidemic_config(args):
    settings = {}
    if args.config:
        try:
            settings.update(json.loads(Path(args.config).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise errors.ConfigError(f"cannot read --config: {exc}") from None
    types = {f.name: f.type for f in fields(synth.EpidemicConfig)}
    defaults = synth.EpidemicConfig()
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep or key not in types:
            raise errors.ConfigError(f"bad --set {item!r}; known keys: {sorted(types)}")
        current = getattr(defaults, key)
        try:
            if isinstance(current, tuple):
                settings[key] = tuple(float(v) for v in value.split(","))
            elif isinstance(current, str):
                settings[key] = value
            elif isinstance(current, int) and not isinstance(current, bool):
                settings[key] = int(value)
            else:
                settings[key] = float(value)
        except ValueError:
            raise errors.ConfigError(f"bad value in --set {item!r}") from None
    unknown = set(settings) - set(types)
    if unknown:
        raise errors.ConfigError(f"unknown epidemic settings {sorted(unknown)}")
    for k, v in settings.items():
        if isinstance(v, list):
            settings[k] = tuple(v)
    try:
        return synth.EpidemicConfig(**settings)
    except TypeError as exc:
        raise errors.ConfigError(str(exc)) from None


def cmd_simulate(args):
    run = Run(args, "simulate")
    seed = _seed(args)
    run.doc["seed"] = seed
    if args.kind == "null":
        ds = synth.simulate_null(args.n, seed=seed)
        run.doc["config"] = {"kind": "null", "n": args.n}
        M.write_case_data(ds, run.path("cases.csv"))
    else:
        cfg = _epidemic_config(args)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always", synth.ExtinctEpidemic)
            ep = synth.simulate_epidemic(cfg, seed)
        run.doc["warnings"].extend(str(w.message) for w in caught)
        run.doc["config"] = dict(asdict(cfg), kind="epidemic")
        run.doc["simulation"] = ep.meta
        ep.write(run.path("cases.csv"), run.path("tree.json"))
    return run.finish()


def cmd_bands(args):
    run = Run(args, "bands")
    run.doc["seed"] = _seed(args)
    args.estimator = E.ODDS
    data = _load(args)
    bands = _bands(args.bands, data)
    ds = data.cases_only()
    d = P.pair_distances(ds)
    counts = [int(np.count_nonzero((d >= b.lo) & (d < b.hi))) for b in bands]
    run.doc["config"] = {"bands": args.bands}
    run.doc["band_preview"] = {"edges": bands.to_list(), "style": bands.style, "pair_counts": counts,
                        "plot_x": E._jsonable(bands.plot_points())}
    if run.want_csv():
        with open(run.path("bands.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write("band_lo,band_hi,n_pairs\n")
            for b, c in zip(bands, counts):
                fh.write(f"{E._fmt(b.lo)},{E._fmt(b.hi)},{c}\n")
    return run.finish()


COMMANDS = {"tau": cmd_tau, "range": cmd_range, "test": cmd_test, "map": cmd_map,
            "simulate": cmd_simulate, "bands": cmd_bands}


def _emit_error(exc):
    payload = exc.to_dict()
    payload["exit_code"] = exc.exit_code
    print(json.dumps(payload, sort_keys=True), file=sys.stderr)
    return exc.exit_code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        if exc.code in (0, None):
            return 0
        return _emit_error(errors.ConfigError("invalid command line (see usage above)"))
    if getattr(args, "workers", 1) < 1:
        return _emit_error(errors.ConfigError("--workers must be >= 1"))
    try:
        return COMMANDS[args.command](args)
    except errors.TauKitError as exc:
        return _emit_error(exc)
    except OSError as exc:
        return _emit_error(errors.DataError(f"{exc.strerror}: {exc.filename}"))
    except Exception as exc:  # keep the error contract machine-readable
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": 1},
                         sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
