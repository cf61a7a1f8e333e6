"""Command-line entry point.

Subcommands mirror the harness experiments; any config key can be overridden
with repeated ``--set key=value`` flags on top of the common shortcuts.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from .config import ExperimentConfig
from .frontend import DesignPoint
from .harness import (ExperimentResult, _write_gnuplot, _write_result_json,
                      feasibility_experiment, op_count_report, run_convergence,
                      sweep, write_sweep_csv)


def _coerce(field_type, raw: str):
    if field_type in ("int", int):
        return int(raw)
    if field_type in ("float", float):
        return float(raw)
    if field_type in ("bool", bool):
        return raw.lower() in ("1", "true", "yes", "on")
    return raw


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.scheme is not None:
        changes["scheme"] = args.scheme
    if args.jobs is not None:
        changes["jobs"] = args.jobs
    fields = {f.name: f for f in dataclasses.fields(ExperimentConfig)}
    for item in args.set or []:
        key, _, raw = item.partition("=")
        if not _ or key not in fields:
            raise SystemExit(f"bad override {item!r}; use --set key=value with a config key")
        current = getattr(cfg, key)
        target = type(current) if current is not None else str
        changes[key] = _coerce(target, raw)
    return cfg.replace(**changes) if changes else cfg


def _common_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="YAML config file")
    parser.add_argument("--seed", type=int, default=None, help="base seed")
    parser.add_argument("--scheme", choices=["shc", "mm", "random", "zf", "mrc"],
                        default=None)
    parser.add_argument("--out", default="out", help="output directory")
    parser.add_argument("--jobs", type=int, default=None, help="parallel workers")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override any config key (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="shcsim",
        description="Quantized massive-MIMO uplink combining: solver and benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)

    converge = sub.add_parser("converge", help="replicated runs with iteration traces")
    _common_flags(converge)
    converge.add_argument("--warm-start", help="JSON design-point warm start")
    converge.add_argument("--dump-channels", action="store_true",
                          help="dump training channel samples as CSV")

    sw = sub.add_parser("sweep", help="all schemes across one axis")
    _common_flags(sw)
    sw.add_argument("--axis", required=True, choices=["users", "antennas", "bits"])
    sw.add_argument("--values", required=True, nargs="+", type=int)

    feas = sub.add_parser("feasibility", help="held-out rate-constraint probability")
    _common_flags(feas)
    feas.add_argument("--delayed", action="store_true",
                      help="evaluate the delayed-CSI per-slot contender instead")

    oc = sub.add_parser("opcount", help="instrumented per-scheme operation counts")
    _common_flags(oc)
    oc.add_argument("--iterations", type=int, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    cfg = _apply_overrides(cfg, args)
    out = args.out

    if args.command == "converge":
        x0 = DesignPoint.from_json(args.warm_start) if args.warm_start else None
        result = run_convergence(cfg, out_dir=out, dump_channels=args.dump_channels,
                                 x0=x0)
        print(f"converge: {len(result.completed)}/{result.replications} runs, "
              f"feasible {result.feasible_fraction:.0%}, "
              f"mean power {result.mean_power_dbm():.2f} dBm")
    elif args.command == "sweep":
        results = sweep(cfg, args.axis, args.values)
        os.makedirs(out, exist_ok=True)
        write_sweep_csv(results, os.path.join(out, "sweep.csv"))
        _write_result_json(out, "sweep", cfg, [r.summary() for r in results])
        _write_gnuplot(out, "sweep")
        for r in results:
            print(f"{args.axis}={r.axis_value:g} {r.scheme:>6}: "
                  f"power {r.mean_power_dbm():7.2f} dBm, "
                  f"feasible {r.feasible_fraction:.0%}")
    elif args.command == "feasibility":
        prob = feasibility_experiment(cfg, delayed=args.delayed)
        label = "delayed-csi contender" if args.delayed else "statistical design"
        _write_result_json(out, "feasibility", cfg,
                           [{"delayed": args.delayed, "feasible_probability": prob}])
        print(f"feasibility[{label}]: {prob:.2%}")
    elif args.command == "opcount":
        report = op_count_report(cfg, iterations=args.iterations)
        _write_result_json(out, "opcount", cfg, [report])
        print(json.dumps(report, indent=2, default=float))
    return 0


if __name__ == "__main__":
    sys.exit(main())
