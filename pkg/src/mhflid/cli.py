"""Command-line interface: run / validate / compare."""
from __future__ import annotations

import argparse
import os
import sys

from .config import ConfigError, load_config, validate
from .data import DataError
from .harness import compare_runs, run_and_write, with_overrides
from .protocol import ProtocolError
from .tensor import ShapeError


def _default_out_dir(config_path: str, method: str, seed: int) -> str:
    stem = os.path.splitext(os.path.basename(config_path))[0]
    return os.path.join("runs", f"{stem}_{method}_seed{seed}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mhflid", description="Heterogeneous federated learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run an experiment from a JSON config")
    run_p.add_argument("--config", required=True, help="path to the JSON config")
    run_p.add_argument("--seed", type=int, default=None, help="override the config seed")
    run_p.add_argument("--out", default=None, help="override the output directory")
    run_p.add_argument("--method", choices=["mhpflid", "fedavg", "local"], default=None, help="override the method")

    val_p = sub.add_parser("validate", help="type-check a config and run all shape audits")
    val_p.add_argument("--config", required=True, help="path to the JSON config")

    cmp_p = sub.add_parser("compare", help="tabulate summaries of finished runs")
    cmp_p.add_argument("run_dirs", nargs="+", help="run output directories")
    return parser


def cmd_run(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    config = with_overrides(config, seed=args.seed, method=args.method, out_dir=args.out)
    out_dir = config.out_dir or _default_out_dir(args.config, config.method, config.seed)
    result = run_and_write(config, out_dir)
    avg = result.summary["average"]
    parts = ", ".join(f"{k}={v:.4f}" for k, v in sorted(avg.items()))
    print(f"method={config.method} seed={config.seed} rounds={config.rounds.rounds}")
    for cid, entry in sorted(result.summary["clients"].items(), key=lambda kv: int(kv[0])):
        line = ", ".join(f"{k}={v:.4f}" for k, v in sorted(entry.items()))
        print(f"  client {cid}: {line}")
    print(f"  average: {parts}")
    print(f"outputs written to {out_dir}")
    return 0


def cmd_validate(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    report = validate(config)
    counts = report["local_param_counts"]
    print(f"config OK: task={config.task} method={config.method} clients={len(config.clients)}")
    for cid, n in counts.items():
        print(f"  client {cid} ({config.clients[cid]}): {n} parameters")
    print(f"  messenger: {report['messenger_param_count']} parameters")
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    print(compare_runs(args.run_dirs))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args)
        if args.command == "validate":
            return cmd_validate(args)
        return cmd_compare(args)
    except (ConfigError, DataError, ProtocolError, ShapeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
