"""Command-line entry point.

Every subcommand prints one report (JSON by default, CSV where rows make
sense) that starts with the fully resolved configuration, so a report can
be replayed.  Exit status: 0 on success, 2 on usage errors, 1 on runtime
errors.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import apps, bounds
from .code import CellState, CodedProductGrid, CodeParams, assemble_result
from .errors import CodedMMError, InvalidArgument
from .linalg import RowBlockPartition, load_matrix, matmul_reference, relative_error, save_matrix
from .sim import DirectoryStore, SimConfig, Simulator

SCHEMA = 1

SWEEP_COLUMNS = ("L", "n", "undecodable_bound", "redundancy_over_total", "redundancy_over_systematic")


def _l_range(text):
    try:
        lo, hi = (int(t) for t in text.split(".."))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected L_MIN..L_MAX, got {text!r}") from None
    if not 1 <= lo <= hi:
        raise argparse.ArgumentTypeError(f"empty or invalid range {text!r}")
    return lo, hi


def _sim_config(args):
    cfg = SimConfig.load(args.config) if args.config else SimConfig()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _envelope(command, config, results, args):
    doc = {"schema": SCHEMA, "command": command, "config": config, "results": results}
    if getattr(args, "timestamp", False):
        doc["timestamp"] = datetime.now(timezone.utc).isoformat()
    return doc


def _dump_json(doc):
    return json.dumps(doc, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def _csv(rows, columns):
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
    w.writeheader()
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def _emit(text, out):
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


# -- subcommands -----------------------------------------------------------


def cmd_bounds(args):
    if args.sweep:
        lo, hi = args.sweep
        rows = bounds.sweep_undecodability(args.p, range(lo, hi + 1))
        if args.format == "csv":
            return _csv(rows, SWEEP_COLUMNS)
        return _dump_json(_envelope("bounds", {"p": args.p, "sweep": [lo, hi]}, {"sweep": rows}, args))

    la, lb, p = args.la, args.lb, args.p
    n = (la + 1) * (lb + 1)
    L = max(la, lb)
    xs = args.x or [2 * n * p * L]
    alphas = bounds.alpha_counts(la, lb)
    results = {
        "n": n,
        "L": L,
        "expected_reads": n * p * L,
        "read_tail": [{"x": x, "bound": bounds.theorem1_bound(n, p, L, x),
                      "chernoff_bound": bounds.chernoff_read_bound(n, p, L, x)} for x in xs],
        "read_tail_at_twice_mean": bounds.corollary_bound(n, p, n * p),
        "undecodable": bounds.theorem2_bound(la, lb, p) if n >= 8 else None,
        "alpha": {"alpha4": alphas.alpha4, "alpha5": alphas.alpha5,
                  "alpha6_ub": alphas.alpha6_ub, "alpha7_ub": alphas.alpha7_ub},
        "locality": bounds.locality_comparison(la, lb),
        "redundancy_over_total": bounds.redundancy_over_total(la, lb),
        "redundancy_over_systematic": bounds.redundancy_over_systematic(la, lb),
    }
    if args.trials:
        mc = bounds.monte_carlo_decode_stats(la, lb, p, args.trials, args.seed)
        results["monte_carlo"] = {
            "trials": mc.trials,
            "p_undecodable": mc.p_undecodable,
            "mean_reads": mc.mean_r,
            "ccdf": [{"x": x, "p": mc.prob_r_at_least(x)} for x in xs],
        }
    config = {"p": p, "la": la, "lb": lb, "x": xs, "trials": args.trials, "seed": args.seed}
    if args.format == "csv":
        rows = [{"x": t["x"], "read_tail": t["bound"], "chernoff": t["chernoff_bound"],
                 "undecodable": results["undecodable"]} for t in results["read_tail"]]
        return _csv(rows, ("x", "read_tail", "chernoff", "undecodable"))
    return _dump_json(_envelope("bounds", config, results, args))


def cmd_enumerate(args):
    count = bounds.enumerate_undecodable(args.la, args.lb, args.s)
    config = {"la": args.la, "lb": args.lb, "s": args.s}
    results = {"count": count, "n": (args.la + 1) * (args.lb + 1)}
    if args.format == "csv":
        return _csv([{**config, **results}], ("la", "lb", "s", "n", "count"))
    return _dump_json(_envelope("enumerate", config, results, args))


def cmd_simulate(args):
    cfg = _sim_config(args)
    params = CodeParams(args.la, args.lb, args.la * args.groups_a, args.lb * args.groups_b)
    rng = np.random.default_rng([cfg.seed, 0xA])
    a = rng.standard_normal((params.ma * args.block_rows, args.cols))
    b = rng.standard_normal((params.mb * args.block_rows, args.cols))
    want = matmul_reference(a, b)
    runs = []
    strategies = ["coded", "speculative"] if args.strategy == "both" else [args.strategy]
    for strategy in strategies:
        sim = Simulator(cfg)
        if strategy == "coded":
            c, rep = sim.coded_matmul(a, b, params)
        else:
            c, rep = sim.speculative_matmul(a, b, (params.ma, params.mb))
        runs.append((rep, relative_error(c, want)))
    if args.format == "csv":
        return "".join(rep.to_csv(header=(k == 0)) for k, (rep, _) in enumerate(runs))
    reports = [dict(rep.to_dict(), relative_error=err) for rep, err in runs]
    config = {"sim": cfg.to_dict(), "params": params.to_dict(), "block_rows": args.block_rows,
              "cols": args.cols, "strategy": args.strategy}
    return _dump_json(_envelope("simulate", config, {"runs": reports}, args))


def cmd_multiply(args):
    cfg = _sim_config(args)
    a = load_matrix(args.a)
    b = load_matrix(args.b)
    params = CodeParams.covering(args.la, args.lb, args.blocks_a, args.blocks_b)
    store = DirectoryStore(args.store, cfg.store.alpha, cfg.store.beta) if args.store else None
    sim = Simulator(cfg, store)
    c, rep = sim.coded_matmul(a, b, params)
    if args.out:
        save_matrix(args.out, c)
    if args.manifest:
        Path(args.manifest).write_text(_dump_json(sim.last_manifest))
    config = {"sim": cfg.to_dict(), "params": params.to_dict(), "a": str(args.a), "b": str(args.b)}
    results = {"report": rep.to_dict(), "shape": list(c.shape)}
    if args.check:
        results["relative_error"] = relative_error(c, matmul_reference(a, b))
    return _dump_json(_envelope("multiply", config, results, args))


def cmd_matvec(args):
    cfg = _sim_config(args)
    a = load_matrix(args.a)
    x = load_matrix(args.x).ravel()
    sim = Simulator(cfg)
    blocks = -(-args.blocks // args.L) * args.L
    y, rep = sim.coded_matvec(a, x, blocks, args.L)
    config = {"sim": cfg.to_dict(), "L": args.L, "blocks": blocks, "a": str(args.a), "x": str(args.x)}
    results = {"report": rep.to_dict(), "y": y}
    return _dump_json(_envelope("matvec", config, results, args))


def cmd_decode(args):
    doc = json.loads(Path(args.manifest).read_text())
    grid = CodedProductGrid.from_manifest(doc)
    if not args.store.is_dir():
        raise FileNotFoundError(f"store directory {args.store} does not exist")
    store = DirectoryStore(args.store)
    outcomes = {}
    for sg in grid.subgrids():
        acct = f"dec:{sg[0]}:{sg[1]}"
        out = grid.decode_subgrid(*sg, fetch=lambda c, acct=acct: store.read_matrix(grid.store_keys[c], acct))
        outcomes[sg] = out
    for cell, key in grid.store_keys.items():
        if grid.is_systematic(*cell) and grid.states[cell] is CellState.PRESENT:
            grid.payloads[cell] = store.read_matrix(key)
    if "partitions" not in doc:
        raise InvalidArgument("manifest has no partitions; it cannot be assembled")
    parts = {k: RowBlockPartition.from_dict(v) for k, v in doc["partitions"].items()}
    c = assemble_result(grid, parts["a"], parts["b"])
    if args.out:
        save_matrix(args.out, c)
    results = {
        "shape": list(c.shape),
        "decoders": [{"unit": list(sg), "reads": o.blocks_read, "recovered": len(o.recovered)}
                     for sg, o in outcomes.items()],
    }
    return _dump_json(_envelope("decode", {"manifest": str(args.manifest), "store": str(args.store)}, results, args))


def cmd_app(args):
    cfg = _sim_config(args)
    ex = apps.Executor(args.strategy, cfg, la=args.la, lb=args.lb, groups=(args.groups, args.groups))
    seed = cfg.seed
    size = args.size
    rng = np.random.default_rng(seed)
    results = {}
    if args.app == "power-iter":
        g = rng.standard_normal((size, size))
        a = g @ g.T / size
        res = apps.power_iteration(a, max_iters=args.iters, tol=args.tol, executor=ex)
        results = {"eigenvalue": res.eigenvalue, "iterations": res.iterations, "trace": res.eigenvalues}
    elif args.app == "krr":
        x, prob = apps.synthetic_krr(size, sigma=8.0, lam=0.01, seed=seed)
        prob.tol = args.tol
        if args.features:
            prob.preconditioner = apps.rff_preconditioner(x, 8.0, args.features, 0.01, seed=seed)
        res = apps.krr_pcg(prob, ex)
        results = {"iterations": res.iterations, "trace": res.residuals,
                   "final_residual": res.residuals[-1]}
    elif args.app == "als":
        r = apps.synth_ratings(size, size, seed=seed)
        res = apps.als(r, args.factors, 0.1, max_iters=args.iters, executor=ex, seed=seed)
        results = {"trace": res.losses, "fit": res.fit}
    else:
        a = rng.standard_normal((size, args.cols))
        res = apps.tall_skinny_svd(a, ex)
        recon = relative_error(res.u * res.s @ res.vt, a)
        results = {"singular_values": res.s, "rank": res.rank, "reconstruction_error": recon}
    results["iteration_times"] = [r.t_total for r in ex.reports]
    results["encode_tasks"] = [r.encode_tasks for r in ex.reports]
    results["total_time"] = ex.total_time()
    config = {"app": args.app, "strategy": args.strategy, "sim": cfg.to_dict(), "size": size,
              "la": args.la, "lb": args.lb, "groups": args.groups, "iters": args.iters}
    return _dump_json(_envelope("app", config, results, args))


# -- parser ------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="codedmm", description="Local product codes for straggler-resilient matrix multiplication.")
    parser.add_argument("--timestamp", action="store_true", help="add a generation timestamp to JSON reports")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("bounds", help="evaluate decoding-cost and undecodability bounds")
    p.add_argument("--p", type=float, default=0.02)
    p.add_argument("--la", type=int, default=10)
    p.add_argument("--lb", type=int, default=10)
    p.add_argument("--x", type=float, action="append", help="read-count threshold (repeatable)")
    p.add_argument("--trials", type=int, default=0, help="Monte Carlo trials (0 = skip)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sweep", type=_l_range, metavar="L_MIN..L_MAX")
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_bounds)

    p = sub.add_parser("enumerate", help="count undecodable straggler sets by brute force")
    p.add_argument("--la", type=int, required=True)
    p.add_argument("--lb", type=int, required=True)
    p.add_argument("--s", type=int, required=True)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.set_defaults(func=cmd_enumerate)

    def sim_flags(p):
        p.add_argument("--config", type=Path, help="JSON simulation config")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("simulate", help="simulate coded and/or speculative multiplication on random data")
    sim_flags(p)
    p.add_argument("--strategy", choices=("coded", "speculative", "both"), default="both")
    p.add_argument("--la", type=int, default=10)
    p.add_argument("--lb", type=int, default=10)
    p.add_argument("--groups-a", type=int, default=2)
    p.add_argument("--groups-b", type=int, default=2)
    p.add_argument("--block-rows", type=int, default=2)
    p.add_argument("--cols", type=int, default=8)
    p.add_argument("--format", choices=("json", "csv"), default="json")
    p.add_argument("--out", dest="report_out", type=Path, help="write the report here instead of stdout")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("multiply", help="coded A B^T of two matrix files")
    sim_flags(p)
    p.add_argument("--a", type=Path, required=True)
    p.add_argument("--b", type=Path, required=True)
    p.add_argument("--la", type=int, default=2)
    p.add_argument("--lb", type=int, default=2)
    p.add_argument("--blocks-a", type=int, default=4)
    p.add_argument("--blocks-b", type=int, default=4)
    p.add_argument("--out", type=Path, help="write C here (CDM1 binary)")
    p.add_argument("--store", type=Path, help="keep blocks in this directory")
    p.add_argument("--manifest", type=Path, help="write the pre-decode grid manifest here")
    p.add_argument("--check", action="store_true", help="compare against the exact product")
    p.set_defaults(func=cmd_multiply)

    p = sub.add_parser("matvec", help="coded A x of a matrix file and a vector file")
    sim_flags(p)
    p.add_argument("--a", type=Path, required=True)
    p.add_argument("--x", type=Path, required=True)
    p.add_argument("--L", type=int, default=2)
    p.add_argument("--blocks", type=int, default=4)
    p.set_defaults(func=cmd_matvec)

    p = sub.add_parser("decode", help="peel-decode a stored grid manifest and assemble C")
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--store", type=Path, required=True)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("app", help="run an application on a chosen executor")
    p.add_argument("app", choices=("power-iter", "krr", "als", "svd"))
    sim_flags(p)
    p.add_argument("--strategy", choices=apps.STRATEGIES, default="reference")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--cols", type=int, default=8, help="svd: column count")
    p.add_argument("--iters", type=int, default=20)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--factors", type=int, default=8, help="als: latent factors")
    p.add_argument("--features", type=int, default=0, help="krr: random features for the preconditioner")
    p.add_argument("--la", type=int, default=2)
    p.add_argument("--lb", type=int, default=2)
    p.add_argument("--groups", type=int, default=2)
    p.add_argument("--out", dest="report_out", type=Path, help="write the report here instead of stdout")
    p.set_defaults(func=cmd_app)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        text = args.func(args)
    except (CodedMMError, OSError, json.JSONDecodeError) as exc:
        print(f"codedmm {args.command}: {exc}", file=sys.stderr)
        return 1
    try:
        _emit(text, getattr(args, "report_out", None))
    except OSError as exc:
        print(f"codedmm {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0
