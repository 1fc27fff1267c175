"""Command-line driver: ``billiard-lab <command> --table T [options]``.

Every command writes ``<command>.json`` (and CSV data where there is any)
under ``--out``.  Outputs depend only on the table, the parameters and the
seed; wall-clock times go to the sidecar ``run.log``.

Exit codes: 0 success, 1 a check failed, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import datetime as _dt
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__

COMMANDS = ("validate", "corridors", "cells", "expansion", "zq", "correlate", "clt", "tail", "perturb")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- output helpers

def _clean(x):
    if isinstance(x, dict):
        return {str(k): _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, np.ndarray):
        return _clean(x.tolist())
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    return x


def write_json(path: Path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(_clean(obj), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path: Path, rows, columns=None) -> None:
    rows = [_clean(r) for r in rows]
    if columns is None:
        columns = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})


# ---------------------------------------------------------------- argument parsing

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--table", help="table JSON file or fixture name")
    p.add_argument("--config", help="JSON file whose keys mirror the flags; flags override it")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None,
                   help="numba threads (default: $BILLIARD_LAB_WORKERS or 1)")
    p.add_argument("--out", default=None, help="output directory (default: billiard_out/<command>)")
    p.add_argument("--quiet", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="billiard-lab", description=__doc__.splitlines()[0])
    ap.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = ap.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("validate", help="check admissibility and print table data")
    _common(p)

    p = sub.add_parser("corridors", help="find corridors and check (A1)/(A2)")
    _common(p)

    p = sub.add_parser("cells", help="probe cell extents and expansion near a boundary point")
    _common(p)
    p.add_argument("--h", type=int, default=None, help="boundary point id (default: all)")
    p.add_argument("--n-min", type=int, default=None)
    p.add_argument("--n-max", type=int, default=None)
    p.add_argument("--n-count", type=int, default=None)
    p.add_argument("--k0", type=int, default=None)

    p = sub.add_parser("expansion", help="find m0 with sup L_m < 1 over short unstable curves")
    _common(p)
    p.add_argument("--delta", type=float, default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--m-max", type=int, default=None)
    p.add_argument("--k0", type=int, default=None)

    p = sub.add_parser("zq", help="Z_q contraction of pushed standard pairs")
    _common(p)
    p.add_argument("--q", type=float, default=None)
    p.add_argument("--M", type=int, default=None)
    p.add_argument("--delta0", type=float, default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--k0", type=int, default=None)

    for name, helptext in (("correlate", "autocorrelation of an observable"),
                           ("clt", "central limit test for an observable")):
        p = sub.add_parser(name, help=helptext)
        _common(p)
        p.add_argument("--observable", default=None,
                       help="cos_phi | sin_phi | tau_capped:CAP | displacement_x | "
                            "coboundary:BASE | constant:C | custom:EXPR")
        if name == "correlate":
            p.add_argument("--lags", type=int, default=None, help="maximal lag")
            p.add_argument("--samples", type=int, default=None, help="number of orbit segments")
            p.add_argument("--segment-length", type=int, default=None)
        else:
            p.add_argument("--n-terms", type=int, default=None)
            p.add_argument("--replicas", type=int, default=None)

    p = sub.add_parser("tail", help="free flight tail mu(tau > t)")
    _common(p)
    p.add_argument("--samples", type=int, default=None)

    p = sub.add_parser("perturb", help="local enlargement at q, or make the table generic")
    _common(p)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--q", type=float, nargs=2, default=None, metavar=("X", "Y"),
                   help="boundary point; without it every bad corridor is repaired")
    return ap


DEFAULTS = {
    "seed": 0, "workers": None, "h": None, "n_min": 10, "n_max": 200, "n_count": 12, "k0": 10,
    "delta": 1e-5, "trials": None, "m_max": 10, "q": None, "M": 40, "delta0": 1e-5,
    "observable": "cos_phi", "lags": 30, "samples": None, "segment_length": 1000,
    "n_terms": 10_000, "replicas": 10_000, "eps": 0.1,
}


def _resolve(args: argparse.Namespace) -> dict:
    cfg = {}
    if args.config:
        try:
            with open(args.config) as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    opts = {}
    for k, v in vars(args).items():
        if v is not None:
            opts[k] = v
        elif k in cfg:
            opts[k] = cfg[k]
        else:
            opts[k] = DEFAULTS.get(k)
    unknown = set(cfg) - set(vars(args))
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(sorted(unknown))}")
    if opts.get("q") is not None and args.command == "zq":
        opts["q"] = float(opts["q"])
    return opts


def _load_table(spec: str | None):
    from .fixtures import FIXTURE_NAMES, load_fixture
    from .geometry import AdmissibilityError, load_table

    if not spec:
        raise UsageError("--table is required (a JSON file or one of the fixture names)")
    path = Path(spec)
    try:
        if path.is_file():
            return load_table(path)
        name = path.name[:-5] if path.name.endswith(".json") else path.name
        if name in FIXTURE_NAMES:
            return load_fixture(name)
    except AdmissibilityError:
        raise
    except (ValueError, KeyError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot parse table {spec}: {exc}") from exc
    raise UsageError(f"table {spec!r} not found; fixtures: {', '.join(FIXTURE_NAMES)}")


# ---------------------------------------------------------------- commands

def cmd_validate(table, o, out):
    from .corridors import direction_bound

    info = {
        "name": table.name, "scatterers": len(table.scatterers), "arcs": table.n_arcs,
        "corners": sum(len(sc.corners) for sc in table.scatterers),
        "kappa_min": table.kappa_min, "kappa_max": table.kappa_max,
        "alpha0": table.alpha0 if math.isfinite(table.alpha0) else None,
        "boundary_length": table.total_length, "all_circular": table.all_circular,
        "direction_bound": direction_bound(table), "admissible": True,
    }
    write_json(out / "table.json", table.to_dict())
    return 0, info, [f"admissible: {info['scatterers']} scatterers, {info['arcs']} arcs, "
                     f"{info['corners']} corners, kappa in [{table.kappa_min:.4g}, {table.kappa_max:.4g}]"]


def cmd_corridors(table, o, out):
    from .corridors import classify_and_check

    rep = classify_and_check(table)
    d = rep.to_dict()
    rows = []
    for c in rep.corridors:
        rows.append({"P": c.direction[0], "Q": c.direction[1], "width": c.width,
                     "offset": c.offset, "type": c.type,
                     "lower_realizations": len(c.lower), "upper_realizations": len(c.upper)})
    write_csv(out / "corridors.csv", rows,
              ["P", "Q", "width", "offset", "type", "lower_realizations", "upper_realizations"])
    genuine = [c for c in rep.corridors if not c.incipient]
    lines = [f"table type {rep.table_type}; {len(genuine)} corridors; "
             f"A1 {'ok' if rep.A1_ok else 'FAIL'}, A2 {'ok' if rep.A2_ok else 'FAIL'}, "
             f"incipient {'present' if rep.incipient_present else 'none'}"]
    for c in genuine:
        lines.append(f"  ({c.direction[0]},{c.direction[1]}) width {c.width:.9g} type {c.type}")
    for v in rep.violations:
        lines.append(f"  violation {v['kind']} in direction {tuple(v['direction'])}")
    return (0 if rep.ok else 1), d, lines


def cmd_cells(table, o, out):
    from .singularity import CellEmpty, boundary_point_ids, default_n_range, probe_cell_geometry

    ids = boundary_point_ids(table)
    if not ids:
        raise UsageError("the table has no corridor boundary points")
    hs = ids if o["h"] is None else [o["h"]]
    if any(h not in ids for h in hs):
        raise UsageError(f"--h must be one of {ids}")
    n_range = default_n_range(o["n_min"], o["n_max"], o["n_count"])
    res, rows, lines = [], [], []
    for h in hs:
        try:
            cp = probe_cell_geometry(table, h, n_range, k0=o["k0"])
        except CellEmpty as exc:
            res.append({"h": h, "error": str(exc)})
            lines.append(f"  h={h}: {exc}")
            continue
        res.append(cp.to_dict())
        for r in cp.records:
            rows.append({"h": h, "family": cp.family, **r})
        lines.append(f"  h={h} ({cp.family}): unstable slope {cp.slope_unstable:.3f}, "
                     f"stable slope {cp.slope_stable:.3f}")
    cols = ["h", "family", "n", "unstable_extent", "stable_extent", "min_expansion",
            "dr_min", "dr_max", "alpha_lo", "alpha_hi"]
    write_csv(out / "cells.csv", rows, cols)
    return 0, {"cells": res, "n_range": n_range}, lines


def cmd_expansion(table, o, out):
    from .singularity import find_m0

    trials = o["trials"] or 1000
    m0, est, res = find_m0(table, o["delta"], trials, o["m_max"], o["k0"], seed=o["seed"])
    rows = [{"m": m + 1, "estimate": e} for m, e in enumerate(est)]
    write_csv(out / "expansion.csv", rows, ["m", "estimate"])
    d = {"m0": m0, "estimates": est, "delta": o["delta"], "trials": trials, "last": res.to_dict()}
    line = f"m0 = {m0} (estimate {est[-1]:.4g})" if m0 else f"no m <= {o['m_max']} with estimate < 1"
    return (0 if m0 else 1), d, [line]


def cmd_zq(table, o, out):
    from .singularity import zq_contraction_experiment

    q = 0.5 if o["q"] is None else float(o["q"])
    trials = o["trials"] or 200
    exp = zq_contraction_experiment(table, q, o["M"], o["delta0"], trials, seed=o["seed"], k0=o["k0"])
    rows = []
    for i in range(exp.ratios.shape[0]):
        for l in range(exp.ratios.shape[1]):
            rows.append({"pair": i, "M": l + 1, "ratio": exp.ratios[i, l]})
    write_csv(out / "zq_ratios.csv", rows, ["pair", "M", "ratio"])
    st = exp.stats()
    d = {"q": q, "delta0": o["delta0"], "trials": trials, "M_max": o["M"],
         "M_star": exp.M_star, "by_M": st}
    lines = [f"M* = {exp.M_star}"]
    for s in st:
        lines.append(f"  M={s['M']}: median {s['median']:.4g}, p95 {s['p95']:.4g}")
    return (0 if exp.M_star else 1), d, lines


def cmd_correlate(table, o, out):
    from .statistics import autocorrelation, parse_observable

    obs = parse_observable(o["observable"])
    n = o["samples"] or 10_000
    ce = autocorrelation(table, obs, o["lags"], n, o["seed"], segment_length=o["segment_length"])
    write_csv(out / "correlate.csv", list(ce.rows()), ["lag", "value", "stderr"])
    f = ce.fits
    lines = [f"variance {ce.variance:.6g}, mean {ce.mean:.6g}, rejected {ce.rejected}"]
    if f.get("exponential"):
        lines.append(f"  exponential rate {f['exponential']['rate']:.4g} (R2 {f['exponential']['r2']:.4f}); "
                     f"power exponent {f['power']['exponent']:.4g} (R2 {f['power']['r2']:.4f})")
    else:
        lines.append(f"  too few resolved lags for a fit: {f['lags_used']}")
    return 0, ce.to_dict(), lines


def cmd_clt(table, o, out):
    from .statistics import clt_test, parse_observable

    obs = parse_observable(o["observable"])
    if not obs.bounded:
        raise UsageError(f"clt needs a bounded observable; {obs.kind} is unbounded")
    r = clt_test(table, obs, o["n_terms"], o["replicas"], o["seed"])
    write_csv(out / "clt.csv", list(r.rows()), ["n", "var_S_n"])
    return 0, r.to_dict(), [f"KS {r.ks_stat:.4g} (p {r.p_value:.3g}), variance slope "
                            f"{r.variance_slope:.4f}, sigma^2 {r.sigma2:.5g}"]


def cmd_tail(table, o, out):
    from .statistics import FiniteHorizon, flight_tail

    n = o["samples"] or 1_000_000
    try:
        ft = flight_tail(table, n, o["seed"])
    except FiniteHorizon as exc:
        return 1, {"finite_horizon": True, "message": str(exc)}, [f"finite horizon: {exc}"]
    write_csv(out / "tail.csv", list(ft.rows()), ["t", "tail", "count"])
    return 0, ft.to_dict(), [f"log-log slope over {ft.window}: {ft.slope:.4f}"]


def cmd_perturb(table, o, out):
    from .corridors import EpsTooLarge, NotOnBoundary, classify_and_check, local_enlargement, make_generic
    from .geometry import table_distance

    eps = o["eps"]
    if not eps or eps <= 0:
        raise UsageError("--eps must be positive")
    if o["q"] is not None:
        try:
            new = local_enlargement(table, tuple(o["q"]), eps)
        except NotOnBoundary as exc:
            raise UsageError(str(exc)) from exc
        except EpsTooLarge as exc:
            return 1, {"error": str(exc)}, [str(exc)]
        rep = classify_and_check(new)
        d = {"q": o["q"], "eps": eps, "distance": table_distance(table, new), "report": rep.to_dict()}
        write_json(out / "table.json", new.to_dict())
        return 0, d, [f"distance {d['distance']:.4g} < eps {eps}"]
    res = make_generic(table, eps)
    write_json(out / "table.json", res.table.to_dict())
    d = res.to_dict()
    d.pop("table")
    lines = [f"{len(res.steps)} enlargements, cumulative distance {res.cumulative_distance:.4g}, "
             f"checks {'pass' if res.ok else 'FAIL'}"]
    return (0 if res.ok and res.cumulative_distance < eps else 1), d, lines


HANDLERS = {
    "validate": cmd_validate, "corridors": cmd_corridors, "cells": cmd_cells,
    "expansion": cmd_expansion, "zq": cmd_zq, "correlate": cmd_correlate, "clt": cmd_clt,
    "tail": cmd_tail, "perturb": cmd_perturb,
}


# ---------------------------------------------------------------- entry points

def run(argv=None) -> int:
    from .dynamics import default_workers, set_workers
    from .geometry import AdmissibilityError

    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 2
    if not args.command:
        parser.print_usage(sys.stderr)
        print("error: choose a command: " + ", ".join(COMMANDS), file=sys.stderr)
        return 2
    say = (lambda *a: None) if args.quiet else print
    try:
        o = _resolve(args)
        workers = set_workers(o["workers"] if o["workers"] is not None else default_workers())
        out = Path(o["out"] or os.path.join("billiard_out", args.command))
        try:
            table = _load_table(o["table"])
        except AdmissibilityError as exc:
            if args.command == "validate":
                say(f"not admissible: {exc}")
                return 1
            raise UsageError(f"table is not admissible: {exc}") from exc
        out.mkdir(parents=True, exist_ok=True)
        t0 = time.time()
        code, result, lines = HANDLERS[args.command](table, o, out)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    run_info = {"command": args.command, "table": o["table"], "table_name": table.name,
                "seed": o["seed"], "workers": workers, "version": __version__,
                "params": {k: v for k, v in sorted(o.items())
                           if k not in ("command", "table", "config", "out", "quiet", "seed", "workers")},
                "exit_code": code}
    write_json(out / f"{args.command}.json", {"run": run_info, "result": result})
    with open(out / "run.log", "a") as fh:
        stamp = _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")
        fh.write(f"{stamp} {args.command} table={o['table']} seed={o['seed']} workers={workers} "
                 f"exit={code} elapsed={time.time() - t0:.2f}s\n")
    for line in lines:
        say(line)
    say(f"wrote {out}/{args.command}.json")
    return code


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
