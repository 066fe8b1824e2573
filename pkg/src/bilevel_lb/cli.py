"""
Command-line front end: ``params``, ``verify``, ``trace`` and ``bench``.

Exit codes: 0 success, 1 a check or run failed, 2 usage error.
"""
import argparse
import json
import math
import os
import sys
import tempfile

from . import bench, verifier
from .instance import FunctionClassParams, derive_params, normalize_mode

GRID_AXES = ("kappa", "eps", "sigma", "Delta")


class UsageError(Exception):
    pass


def _positive_float(text):
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None
    if not math.isfinite(v):
        raise argparse.ArgumentTypeError(f"not finite: {text!r}")
    return v


def _nonneg_int(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("function class")
    g.add_argument("--Lf", type=_positive_float, default=1.0, help="smoothness of f (default 1)")
    g.add_argument("--Lg", type=_positive_float, help="smoothness of g")
    g.add_argument("--mu", type=_positive_float, default=1.0,
                   help="strong-convexity modulus of g (default 1)")
    g.add_argument("--Delta", type=_positive_float, default=1.0,
                   help="initial hyper-objective gap (default 1; at most 10*Lf)")
    g.add_argument("--eps", type=_positive_float, help="target stationarity")
    g.add_argument("--sigma", type=_positive_float, default=0.0,
                   help="oracle noise level; required > 0 with --mode stoc (default 0)")
    g.add_argument("--mode", choices=("det", "stoc"), default="det",
                   help="deterministic or stochastic instance (default det)")
    o = common.add_argument_group("run and output")
    o.add_argument("--seed", type=_nonneg_int, default=0, help="root seed for all randomness (default 0)")
    o.add_argument("--budget", type=_nonneg_int,
                   help="oracle-call budget per run (default: derived from the chain length)")
    o.add_argument("--out", help="write the report here (atomically) instead of stdout")
    o.add_argument("--format", choices=("json", "csv"), default="json",
                   help="report format; csv only for bench rows (default json)")

    parser = argparse.ArgumentParser(
        prog="bilevel-lb",
        description="Hard bilevel instances for first-order lower bounds: derive, verify, trace, bench.",
        epilog="Pool size for parallel work comes from the THREADS environment variable "
               "(default: core count). Exit codes: 0 ok, 1 failed check/run, 2 usage error.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    sub.add_parser("params", parents=[common], help="print derived instance parameters")
    sub.add_parser("verify", parents=[common], help="run the certification suite")
    tr = sub.add_parser("trace", parents=[common], help="run the canonical greedy prober and audit supports")
    tr.add_argument("--log", help="write activation events as JSON lines to this path")
    be = sub.add_parser("bench", parents=[common], help="benchmark algorithms and fit scaling exponents")
    be.add_argument("--alg", action="append", choices=bench.ALGORITHMS,
                    help="algorithm to run; repeatable (default greedy_prober)")
    be.add_argument("--grid", action="append", default=[], metavar="AXIS=V1,V2,...",
                    help=f"sweep an axis ({', '.join(GRID_AXES)}); repeatable, cells are the product")
    be.add_argument("--runs", type=_nonneg_int, default=1,
                    help="seeds per cell: seed, seed+1, ... (default 1)")
    be.add_argument("--stride", type=_nonneg_int, default=1,
                    help="evaluate stationarity every this many oracle calls (default 1)")
    return parser


def parse_grid(specs):
    grid = {}
    for spec in specs:
        if "=" not in spec:
            raise UsageError(f"grid spec {spec!r} must look like axis=v1,v2")
        axis, vals = spec.split("=", 1)
        axis = axis.strip()
        if axis not in GRID_AXES:
            raise UsageError(f"unknown grid axis {axis!r}; choose from {', '.join(GRID_AXES)}")
        try:
            values = [float(v) for v in vals.split(",") if v.strip()]
        except ValueError:
            raise UsageError(f"bad values in grid spec {spec!r}") from None
        if not values:
            raise UsageError(f"grid spec {spec!r} has no values")
        grid[axis] = values
    return grid


def _fc(args, kappa=None, eps=None, sigma=None, Delta=None):
    Lg = args.Lg if kappa is None else kappa * args.mu
    eps = args.eps if eps is None else eps
    if Lg is None:
        raise UsageError("--Lg is required (or sweep kappa with --grid)")
    if eps is None:
        raise UsageError("--eps is required (or sweep eps with --grid)")
    return FunctionClassParams(
        L_f=args.Lf, L_g=Lg, mu=args.mu, Delta=args.Delta if Delta is None else Delta,
        eps=eps, sigma=args.sigma if sigma is None else sigma)


def _derive(fc, mode):
    mode = normalize_mode(mode)
    if mode == "stochastic" and not fc.sigma > 0:
        raise UsageError("--mode stoc needs --sigma > 0")
    if mode == "deterministic" and fc.sigma != 0:
        raise UsageError("--sigma is only meaningful with --mode stoc")
    try:
        return derive_params(fc, mode)
    except ValueError as exc:
        raise UsageError(f"invalid parameters {fc}: {exc}") from None


def _check_out(path):
    if path is None:
        return
    d = os.path.dirname(os.path.abspath(path)) or "."
    if not os.path.isdir(d) or not os.access(d, os.W_OK):
        raise UsageError(f"cannot write to {path!r}")


def write_atomic(path, text):
    d = os.path.dirname(os.path.abspath(path)) or "."
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _emit(args, text):
    if args.out:
        write_atomic(args.out, text)
    else:
        sys.stdout.write(text)


def _json(obj):
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def default_budget(pr):
    base = pr.chain_length + 4
    if pr.stochastic:
        base += int(math.ceil(10 * pr.chain_length / pr.p))
    return max(1000, 50 * base)


def cmd_params(args):
    pr = _derive(_fc(args), args.mode)
    _emit(args, _json(pr.to_dict()))
    return 0


def cmd_verify(args):
    fc = _fc(args)
    pr = _derive(fc, args.mode)
    results = verifier.run_suite(fc, args.mode, args.seed, params=pr)
    rep = verifier.suite_report(fc, args.mode, results, params=pr)
    _emit(args, verifier.report_json(rep))
    return 0 if rep["all_pass"] else 1


def cmd_trace(args):
    fc = _fc(args)
    pr = _derive(fc, args.mode)
    _check_out(args.log)
    budget = args.budget
    if budget is None:
        budget = pr.chain_length + 4
        if pr.stochastic:
            budget += int(math.ceil(10 * pr.chain_length / pr.p))
    if budget < 1:
        raise UsageError("--budget must be >= 1 for trace")
    ct = verifier.chain_trace(fc, args.mode, args.seed, budget, params=pr)
    if args.log:
        write_atomic(args.log, ct.jsonl)
    d = ct.to_dict()
    d["chain_length"] = pr.chain_length
    d["ok"] = ct.ok
    _emit(args, _json(d))
    return 0 if ct.ok else 1


def cmd_bench(args):
    grid = parse_grid(args.grid)
    algs = args.alg or ["greedy_prober"]
    axes = {a: grid.get(a, [None]) for a in GRID_AXES}
    cells = []
    for kappa in axes["kappa"]:
        for eps in axes["eps"]:
            for sigma in axes["sigma"]:
                for Delta in axes["Delta"]:
                    fc = _fc(args, kappa, eps, sigma, Delta)
                    cells.append((fc, _derive(fc, args.mode)))
    seeds = [args.seed + k for k in range(max(1, args.runs))]
    traces = []
    for name in algs:
        spec = bench.AlgorithmSpec(name)
        for fc, pr in cells:
            budget = args.budget if args.budget is not None else default_budget(pr)
            for s in seeds:
                traces.append(bench.run_algorithm(spec, fc, args.mode, s, budget,
                                                  stride=max(1, args.stride), params=pr))
    fits = []
    notes = []
    for axis, key in (("kappa", "kappa"), ("eps", "eps")):
        if len(grid.get(key, [])) < 2:
            continue
        for name in algs:
            group = [t for t in traces if t.algorithm == name]
            try:
                fits.append(bench.fit_scaling(group, axis))
            except ValueError as exc:
                notes.append(f"{name}/{axis}: {exc}")
    csv_text, summary = bench.report(traces, fits)
    for note in notes:
        print(f"fit skipped: {note}", file=sys.stderr)
    if args.format == "csv":
        _emit(args, csv_text)
        for f in fits:
            print(f"fit {f.axis}: exponent {f.exponent:.4f} (r^2 {f.r_squared:.4f})", file=sys.stderr)
    else:
        _emit(args, bench.summary_json(summary))
    return 1 if summary["failures"] else 0


COMMANDS = {"params": cmd_params, "verify": cmd_verify, "trace": cmd_trace, "bench": cmd_bench}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else 0
    try:
        if args.format == "csv" and args.command != "bench":
            raise UsageError("--format csv is only available for bench")
        _check_out(args.out)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"bilevel-lb {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
