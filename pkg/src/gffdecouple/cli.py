"""Command-line front end.

Exit codes: 0 success, 1 statistical failure, 2 usage or configuration
error, 3 numeric error. Every command writes ``manifest.json`` next to its
data files. Options may also come from ``--config FILE`` (flat ``key = value``
lines, or a previous manifest); flags win over the file, the file over
defaults.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .correlation import correlation_sweep, max_correlation
from .decoupling import (choose_delta, parse_test_function, verify_conditional,
                         verify_unconditional)
from .errors import ConfigurationError, DomainError, GFFError, NumericError
from .green import GreenKernel, green_at
from .lattice import PointSet, auxiliary_sets
from .percolation import (ExcursionConfig, crossing_probability, fit_decay, hstar_scan,
                          two_point_function)
from .sampler import conditional_model

CACHE_ENV = "GFFDECOUPLE_CACHE_DIR"
EXIT_OK, EXIT_STAT, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

DEFAULT_DISPLACEMENTS = "0,0,0;1,0,0;1,1,0;1,1,1;2,0,0;2,1,0;2,1,1;2,2,0;3,0,0;2,2,1;3,1,0"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- parsing helpers --------------------------------------------------------------

def parse_point(text: str) -> tuple:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"malformed coordinates {text!r}") from None


def parse_int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"malformed integer list {text!r}") from None


def parse_levels(text: str) -> list[float]:
    """``a:b:step`` (inclusive) or a comma list."""
    text = str(text)
    try:
        if ":" in text:
            a, b, step = (float(v) for v in text.split(":"))
            if step <= 0 or b < a:
                raise ValueError
            n = int(round((b - a) / step)) + 1
            return [round(a + i * step, 12) for i in range(n)]
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise UsageError(f"malformed level grid {text!r}") from None


def read_point_set(path: str, d: int | None = None) -> PointSet:
    """JSON written by ``PointSet.save`` or a text file with one ``x,y,z`` per line."""
    text = Path(path).read_text()
    if text.lstrip().startswith("{") or text.lstrip().startswith("["):
        return PointSet.from_json(text)
    pts = [parse_point(line.strip()) for line in text.splitlines()
           if line.strip() and not line.lstrip().startswith("#")]
    return PointSet(pts, d=d)


def read_config(path: str) -> dict:
    text = Path(path).read_text()
    if text.lstrip().startswith("{"):
        return dict(json.loads(text).get("config", {}))
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key = value")
        k, v = (s.strip() for s in line.split("=", 1))
        out[k.replace("-", "_")] = v
    return out


def fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


# -- manifest -----------------------------------------------------------------------

def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, config: dict, kernel: GreenKernel | None,
                   files: list, t0: float) -> Path:
    man = {
        "schema_version": 1,
        "command": command,
        "config": config,
        "master_seed": config.get("seed"),
        "versions": {"gffdecouple": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "kernel_cache_id": kernel.cache_id if kernel is not None else None,
        "wall_clock_s": time.time() - t0,
        "digests": {Path(f).name: sha256(f) for f in files},
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(man, indent=1, default=float))
    return path


def load_kernel(d: int, tol: float = 1e-10) -> GreenKernel:
    k = GreenKernel(d=d, tol=tol)
    cache = os.environ.get(CACHE_ENV)
    if cache:
        f = Path(cache) / f"green-{k.cache_id}.json"
        if f.exists():
            k.load(f)
    return k


def save_kernel(k: GreenKernel):
    cache = os.environ.get(CACHE_ENV)
    if cache:
        Path(cache).mkdir(parents=True, exist_ok=True)
        k.save(Path(cache) / f"green-{k.cache_id}.json")


def write_gnuplot(out: Path, name: str, csv: str, xcol: int, ycol: int, xlabel: str,
                  ylabel: str, logy: bool = False) -> Path:
    path = out / f"{name}.gp"
    lines = ["set datafile separator ','", "set key off",
             f"set xlabel '{xlabel}'", f"set ylabel '{ylabel}'",
             f"set terminal pngcairo size 800,600",
             f"set output '{name}.png'"]
    if logy:
        lines.append("set logscale y")
    lines.append(f"plot '{csv}' using {xcol}:{ycol} every ::1 with linespoints")
    path.write_text("\n".join(lines) + "\n")
    return path


# -- commands -----------------------------------------------------------------------

def cmd_green(a, out: Path):
    x, d = parse_point(a.x), int(a.d)
    k = load_kernel(d, float(a.tol))
    if len(x) != d:
        raise UsageError(f"expected {d} coordinates, got {len(x)}")
    v = green_at(k, x)
    print(f"g(0,{','.join(map(str, x))}) = {fmt(v)}")
    f = out / "green.json"
    f.write_text(json.dumps({"schema_version": 1, "d": d, "x": list(x), "value": v,
                             "cache_id": k.cache_id}))
    save_kernel(k)
    return k, [f], EXIT_OK


def cmd_rho(a, out: Path):
    K1, K2 = read_point_set(a.set1), read_point_set(a.set2)
    if K1.d != K2.d:
        raise UsageError("point sets have different dimensions")
    if not K1.isdisjoint(K2):
        raise DomainError("point sets overlap")
    k = load_kernel(K1.d)
    rep = max_correlation(k, K1, K2)
    print(f"rho = {fmt(rep.rho)}  alpha >= {fmt(rep.alpha_lower)}  "
          f"ratio = {fmt(rep.ratio)}  separated = {rep.separated}")
    f = out / "correlation.json"
    f.write_text(rep.to_json())
    files = [f]
    if a.scale:
        rows = correlation_sweep(k, K1, K2, parse_int_list(a.scale))
        g = out / "sweep.csv"
        with open(g, "w") as fh:
            fh.write("scale,r,rho,sandwich_term,ratio,alpha_lower\n")
            for r in rows:
                fh.write(f"{r['scale']},{r['r']:.17g},{r['rho']:.17g},"
                         f"{r['sandwich_term']:.17g},{r['ratio']:.17g},{r['alpha_lower']:.17g}\n")
                print(f"scale {r['scale']}: r = {fmt(r['r'])} ratio = {fmt(r['ratio'])}")
        files.append(g)
        if a.emit_plots:
            files.append(write_gnuplot(out, "sweep", "sweep.csv", 2, 5, "r", "ratio"))
    save_kernel(k)
    return k, files, EXIT_OK


def cmd_decouple(a, out: Path):
    K1 = read_point_set(a.K1) if a.K1 else PointSet([[0, 0, 0]])
    K2 = read_point_set(a.K2) if a.K2 else PointSet([[8, 0, 0]])
    k = load_kernel(K1.d)
    model = conditional_model(k, K1, K2)
    if a.delta_from_target is not None:
        geom = auxiliary_sets(K1, K2)
        delta = choose_delta(geom, k, float(a.delta_from_target))
    else:
        delta = float(a.delta)
    if not delta > 0:
        raise ConfigurationError("delta must be positive")
    f2 = parse_test_function(a.f2, K2)
    f1 = parse_test_function(a.f1, K1)
    rc = verify_conditional(model, f2, delta, n_outer=int(a.n_outer),
                            n_inner=int(a.n_inner), seed=int(a.seed),
                            workers=int(a.workers))
    ru = verify_unconditional(model, f1, f2, delta, n=int(a.n), seed=int(a.seed),
                          workers=int(a.workers))
    print(f"delta = {fmt(delta)}")
    for r in (rc, ru):
        print(f"{r.kind}: violations {r.violations}/{r.tests}  p-value {fmt(r.p_value)}  "
              f"coupling failures {r.coupling_failures}  {'PASS' if r.passed else 'FAIL'}")
    f = out / "decoupling.json"
    f.write_text(json.dumps({"schema_version": 1, "delta": delta,
                             "conditional": rc.to_dict(), "unconditional": ru.to_dict()},
                            default=float))
    g = out / "margins.csv"
    rc.margins_to_csv(g)
    save_kernel(k)
    a.delta = delta
    return k, [f, g], EXIT_OK if (rc.passed and ru.passed) else EXIT_STAT


def _excursion(a, h) -> ExcursionConfig:
    return ExcursionConfig(h=h, L=int(a.L), d=int(a.d), method=a.method,
                           padding=int(a.padding), samples=int(a.n), seed=int(a.seed))


def cmd_percolate(a, out: Path):
    levels = parse_levels(a.h)
    k = load_kernel(int(a.d))
    st = crossing_probability(_excursion(a, levels[0]), levels=levels, event=a.event,
                              kernel=k)
    for h, p, e in zip(st.levels, st.crossing_prob, st.crossing_se):
        print(f"h = {fmt(float(h))}: P = {fmt(float(p))} +- {fmt(float(e))}")
    f = out / "crossing.csv"
    st.crossing_csv(f)
    g = out / "crossing.json"
    g.write_text(st.to_json())
    files = [f, g]
    if a.emit_plots:
        files.append(write_gnuplot(out, "crossing", "crossing.csv", 1, 2, "h",
                                   "crossing probability"))
    return k, files, EXIT_OK


def cmd_hstar_scan(a, out: Path):
    k = load_kernel(int(a.d))
    tab = hstar_scan(parse_int_list(a.L), parse_levels(a.h), int(a.n), int(a.seed),
                     d=int(a.d), method=a.method, padding=int(a.padding), kernel=k)
    f = out / "scan.csv"
    tab.to_csv(f)
    g = out / "scan.json"
    g.write_text(tab.to_json())
    p = tab.threshold_proxy
    print(f"threshold proxy at L = {p['L']}: h = {p['h']} ({p['status']}), "
          f"bracket [{p['h_low']}, {p['h_high']}]")
    files = [f, g]
    if a.emit_plots:
        files.append(write_gnuplot(out, "scan", "scan.csv", 2, 3, "h",
                                   "crossing probability"))
    return k, files, EXIT_OK


def cmd_connect(a, out: Path):
    k = load_kernel(int(a.d))
    disp = [parse_point(s) for s in a.displacements.split(";")]
    tp = two_point_function(_excursion(a, float(a.h)), disp, kernel=k)
    f = out / "two_point.csv"
    tp.two_point_csv(f)
    files = [f]
    code = EXIT_OK
    for x, e in tp.two_point.items():
        bound = tp.single_site[x].value
        print(f"x = {x}: P = {fmt(e.value)} +- {fmt(e.se)}  (single-site {fmt(bound)})")
        if e.value > bound:
            code = EXIT_STAT
    if a.fit:
        b = float(a.b) if a.b is not None else None
        fit = fit_decay(tp, a.fit, b)
        g = out / "decay_fit.json"
        g.write_text(fit.to_json())
        files.append(g)
        print(fit.to_json())
    if a.emit_plots:
        files.append(write_gnuplot(out, "two_point", "two_point.csv", 2, 3, "|x|",
                                   "P[0 <-> x]", logy=True))
    return k, files, code


# -- parser ---------------------------------------------------------------------------

DEFAULTS = {
    "green": {"d": 3, "x": "0,0,0", "tol": 1e-10},
    "rho": {"scale": None},
    "decouple": {"K1": None, "K2": None, "delta": 1.0, "delta_from_target": None,
                 "f2": "threshold:1", "f1": "threshold:1", "n_outer": 100,
                 "n_inner": 10_000, "n": 100_000},
    "percolate": {"d": 3, "L": 8, "h": "0", "n": 200, "method": "auto", "padding": 2,
                  "event": "ustarstar"},
    "hstar-scan": {"d": 3, "L": "8,12", "h": "0:2:0.25", "n": 200, "method": "auto",
                   "padding": 2},
    "connect": {"d": 3, "L": 16, "h": 3.0, "n": 2000, "method": "auto", "padding": 2,
                "displacements": DEFAULT_DISPLACEMENTS, "fit": None, "b": None},
}
COMMON = {"seed": 0, "workers": 1, "out": "gff-out", "emit_plots": False}
COMMANDS = {"green": cmd_green, "rho": cmd_rho, "decouple": cmd_decouple,
            "percolate": cmd_percolate, "hstar-scan": cmd_hstar_scan,
            "connect": cmd_connect}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="gffdecouple", description="Gaussian free field decoupling toolkit")
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    def common(sp):
        sp.add_argument("--help", action="help", help="show this help message and exit")
        sp.add_argument("--config", help="flat key = value file or a previous manifest")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--workers", type=int)
        sp.add_argument("--out", help="output directory")
        sp.add_argument("--emit-plots", action="store_true", default=None)

    g = sub.add_parser("green", add_help=False, help="evaluate g(0, x)")
    common(g)
    g.add_argument("-d", type=int)
    g.add_argument("-x")
    g.add_argument("--tol", type=float)

    r = sub.add_parser("rho", add_help=False, help="maximal correlation of two point sets")
    common(r)
    r.add_argument("set1")
    r.add_argument("set2")
    r.add_argument("--scale", help="comma list of scale factors for a sweep")

    dc = sub.add_parser("decouple", add_help=False, help="verify the decoupling inequalities")
    common(dc)
    dc.add_argument("--K1")
    dc.add_argument("--K2")
    grp = dc.add_mutually_exclusive_group()
    grp.add_argument("--delta", type=float)
    grp.add_argument("--delta-from-target", type=float)
    dc.add_argument("--f2")
    dc.add_argument("--f1")
    dc.add_argument("--n-outer", type=int)
    dc.add_argument("--n-inner", type=int)
    dc.add_argument("-n", type=int, help="draws per block for the unconditional check")

    for name, hlp in (("percolate", "crossing probabilities over a level grid"),
                      ("hstar-scan", "crossing table over (L, h) with proxies"),
                      ("connect", "two-point function and decay fit")):
        sp = sub.add_parser(name, add_help=False, help=hlp)
        common(sp)
        sp.add_argument("-d", type=int)
        sp.add_argument("-L")
        sp.add_argument("-h", help="level or grid a:b:step")
        sp.add_argument("-n", type=int, help="number of samples")
        sp.add_argument("--method", choices=("auto", "dense-exact", "spectral-approx"))
        sp.add_argument("--padding", type=int)
        if name == "percolate":
            sp.add_argument("--event", choices=("ustarstar", "ball-sphere"))
        if name == "connect":
            sp.add_argument("--displacements", help="semicolon list of x,y,z")
            sp.add_argument("--fit", choices=("pure-exponential", "log-corrected"))
            sp.add_argument("--b", type=float)
    return p


def resolve(args: argparse.Namespace) -> argparse.Namespace:
    """Fill unset options from the config file, then from defaults."""
    cfg = read_config(args.config) if args.config else {}
    merged = dict(COMMON, **DEFAULTS[args.command])
    for key, default in merged.items():
        if getattr(args, key, None) is None:
            val = cfg.get(key, default)
            if isinstance(default, bool) and isinstance(val, str):
                val = val.lower() in ("1", "true", "yes")
            setattr(args, key, val)
    return args


def main(argv=None) -> int:
    parser = build_parser()
    t0 = time.time()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return EXIT_USAGE
        args = resolve(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        kernel, files, code = COMMANDS[args.command](args, out)
        config = {k: v for k, v in vars(args).items()
                  if k not in ("command", "config", "out") and v is not None}
        write_manifest(out, args.command, config, kernel, files, t0)
        return code
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, DomainError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except GFFError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
