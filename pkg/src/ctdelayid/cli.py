"""Command line front end: dataset generation, estimation, cost sweeps,
Monte Carlo campaigns, and bank analytics.

Exit codes: 0 success, 1 validation error, 2 estimation failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import bench
from .bench import BenchError, load_config
from .models import ModelError
from .signals import SignalError
from .srivc import EstimationError

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_ESTIMATION = 2
EXIT_IO = 3


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="ctdelayid",
        description=(
            "Continuous-time transfer function and time delay estimation "
            "with a redundant multi-filter search"
        ),
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="simulate a dataset from a config")
    g.add_argument("--config", required=True)
    g.add_argument("--out", required=True, help="output CSV path")
    g.add_argument("--seed", type=int, default=None, help="override master seed")

    e = sub.add_parser("estimate", help="estimate a model from a dataset file")
    e.add_argument("dataset")
    e.add_argument("--config", required=True)
    e.add_argument(
        "--method",
        choices=["redundant", "single-filter", "baseline-alg2"],
        default="redundant",
    )
    e.add_argument("--tau0", type=float, default=0.0, help="initial delay guess")
    e.add_argument("--filter-index", type=int, default=None,
                   help="bank filter for method=single-filter (default narrowest)")
    e.add_argument("--out", default=None, help="write the result record here")
    e.add_argument("--j0-threshold", type=float, default=35.0,
                   help="final averaged cost above this flags a local minimum")

    s = sub.add_parser("sweep-cost", help="delay cost sweep for plotting")
    s.add_argument("dataset", nargs="?", default=None,
                   help="omit with --ideal to emit the closed-form curves")
    s.add_argument("--config", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--tau-min", type=float, default=0.0)
    s.add_argument("--tau-max", type=float, default=15.0)
    s.add_argument("--tau-step", type=float, default=0.25)
    s.add_argument("--ideal", action="store_true",
                   help="emit brick-wall-filter analytic curves instead of data sweeps")

    b = sub.add_parser("bench", help="Monte Carlo convergence campaign")
    b.add_argument("--config", required=True)
    b.add_argument("--out", required=True, help="output directory")
    b.add_argument("--workers", type=int, default=1)
    b.add_argument("--runs", type=int, default=None, help="override runs per cell")
    b.add_argument("--seed", type=int, default=None, help="override master seed")
    b.add_argument("--method", choices=["redundant", "baseline-alg2"],
                   default="redundant")

    a = sub.add_parser("analyze-bank", help="print filter bank analytics")
    a.add_argument("--config", required=True)

    return p


def _override_seed(cfg, seed):
    if seed is None:
        return cfg
    from dataclasses import replace

    return replace(cfg, master_seed=int(seed))


def _cmd_generate(args) -> int:
    cfg = _override_seed(load_config(args.config), args.seed)
    written = bench.generate_dataset_files(cfg, args.out)
    for p in written:
        print(f"wrote {p}")
    return EXIT_OK


def _cmd_estimate(args) -> int:
    cfg = load_config(args.config)
    data, _meta = bench.read_dataset(args.dataset)
    result = bench.estimate_from_config(
        data, cfg, args.method, args.tau0, args.filter_index
    )
    record = {
        "method": args.method,
        "tau0": args.tau0,
        "tau_hat": result.model.delay,
        "num": [float(v) for v in result.model.num],
        "den": [float(v) for v in result.model.den],
        "j0": result.j0,
        "converged": result.converged,
        "iterations": result.iterations,
        "trace": [list(row) for row in result.trace],
    }
    text = json.dumps(record, indent=1)
    print(text)
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    if not result.converged:
        return EXIT_ESTIMATION
    if args.method != "redundant" and result.j0 > args.j0_threshold:
        print(
            f"warning: final averaged cost {result.j0:.1f}% exceeds "
            f"{args.j0_threshold:.1f}%; likely a local minimum",
            file=sys.stderr,
        )
        return EXIT_ESTIMATION
    return EXIT_OK


def _cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    grid = np.arange(args.tau_min, args.tau_max + 0.5 * args.tau_step, args.tau_step)
    if args.ideal:
        from .filters import ideal_cost_curve

        bank = cfg.bank()
        per = np.stack([ideal_cost_curve(wc, 0.0, grid) for wc in bank.cutoffs])
        sweep = {"tau": grid, "per_filter": per, "j0": per.mean(axis=0)}
    else:
        if args.dataset is None:
            raise BenchError("sweep-cost needs a dataset unless --ideal is given")
        data, _ = bench.read_dataset(args.dataset)
        sweep = bench.sweep_cost(data, cfg, grid)
    bench.write_sweep_csv(args.out, sweep)
    print(f"wrote {args.out}")
    return EXIT_OK


def _cmd_bench(args) -> int:
    cfg = _override_seed(load_config(args.config), args.seed)
    report = bench.run_campaign(
        cfg, workers=args.workers, runs=args.runs, method=args.method
    )
    paths = bench.write_report(report, args.out)
    for p in paths:
        print(f"wrote {p}")
    worst = min(report.percentages.values())
    print(f"worst cell: {worst:.1f}% converged")
    return EXIT_OK


def _cmd_analyze(args) -> int:
    cfg = load_config(args.config)
    print(bench.bank_report(cfg))
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    handlers = {
        "generate": _cmd_generate,
        "estimate": _cmd_estimate,
        "sweep-cost": _cmd_sweep,
        "bench": _cmd_bench,
        "analyze-bank": _cmd_analyze,
    }
    try:
        return handlers[args.command](args)
    except (BenchError, ModelError, SignalError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except EstimationError as exc:
        print(f"estimation failed: {exc}", file=sys.stderr)
        return EXIT_ESTIMATION
    except (OSError, FileNotFoundError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
