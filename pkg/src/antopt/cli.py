"""Command-line front end over the experiment drivers.

Exit codes: 0 success, 2 usage (bad flags, config, or spec), 3 I/O
(missing or malformed files), 4 numerical failure (divergence,
degenerate deposits).  A run is specified by an optional JSON config
file plus flag overrides; flags win.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import autodiff as ad
from . import bench, colony, problems, training

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="antopt",
        description="ant colony optimization with learned heuristic measures")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in bench.COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--problem", help="TSP | OP | PCTSP | SMTWTP | MKP")
        cmd.add_argument("--scale", type=int, help="instance size n")
        cmd.add_argument("--method",
                         help="comma-separated subset of: "
                              + ", ".join(bench.METHODS))
        cmd.add_argument("--budget", type=int,
                         help="objective-evaluation budget per run")
        cmd.add_argument("--seeds", help="comma-separated integer seeds")
        cmd.add_argument("--config", help="JSON run spec; flags override it")
        cmd.add_argument("--out", help="output file or directory")
    return parser


def _split(raw: str) -> list[str]:
    return [part.strip() for part in raw.split(",") if part.strip()]


def load_spec(args: argparse.Namespace) -> bench.RunSpec:
    data: dict = {}
    if args.config:
        with open(args.config) as fh:
            loaded = json.load(fh)
        if not isinstance(loaded, dict):
            raise bench.BenchError(f"{args.config}: config must be an object")
        data.update(loaded)
    data["command"] = args.command
    if args.problem is not None:
        data["problem"] = args.problem
    if args.scale is not None:
        data["scale"] = args.scale
    if args.method is not None:
        data["methods"] = _split(args.method)
    elif args.command == "grid" and "methods" not in data:
        data["methods"] = ["aco-expert", "deepaco"]
    if args.budget is not None:
        data["budget"] = args.budget
    if args.seeds is not None:
        data["seeds"] = [int(s) for s in _split(args.seeds)]
    if args.out is not None:
        data["out"] = args.out
    try:
        return bench.RunSpec(**data)
    except TypeError as exc:
        raise bench.BenchError(f"bad spec field: {exc}") from None


def _run(spec: bench.RunSpec):
    bench.worker_count()        # reject a malformed env var before work starts
    if spec.command == "generate":
        path = bench.cmd_generate(spec)
        print(f"dataset {path}")
    elif spec.command == "train":
        path, history = bench.cmd_train(spec)
        print(f"checkpoint {path}")
        print(f"final_mean_f {history[-1]['mean_f']!r}")
    elif spec.command == "solve":
        result = bench.cmd_solve(spec)
        print(f"best_objective {result['objective']!r}")
        print("solution " + " ".join(str(i) for i in result["solution"]))
    elif spec.command == "bench":
        bench.cmd_bench(spec)
        print(f"summary {os.path.join(spec.out, 'summary.csv')}")
    elif spec.command == "grid":
        _, variances = bench.cmd_grid(spec)
        for method, var in variances.items():
            print(f"variance {method} {var!r}")
        print(f"grid {os.path.join(spec.out, 'grid.csv')}")
    else:
        rows = bench.cmd_sampling_compare(spec)
        evo = sum(r[2] for r in rows) / len(rows)
        sam = sum(r[3] for r in rows) / len(rows)
        print(f"mean_evolution_final {evo!r}")
        print(f"mean_sampling_final {sam!r}")
        print(f"pairs {os.path.join(spec.out, 'sampling.csv')}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _run(load_spec(args))
        return EXIT_OK
    except (training.TrainingError, colony.ConstructionError,
            colony.DepositError, ad.GradientError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ad.CheckpointError, problems.DatasetError,
            json.JSONDecodeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
