"""Command line front end: run, sweep, stats, synth.

Exit codes: 0 success, 2 config error, 3 trace error.
"""

from __future__ import annotations

import argparse
import json
import sys

from .harness import (ConfigError, ExperimentConfig, MetricsReport,
                      run_experiment, sweep, write_csv)
from .trace import SynthKind, TraceError, dump_msrc, load_msrc, synth_trace, workload_stats

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRACE = 3


def _load_json(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from None


def _cmd_run(args: argparse.Namespace) -> int:
    raw = _load_json(args.config)
    if args.policy:
        raw.setdefault("policy", {})["name"] = args.policy
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.deterministic:
        raw["deterministic"] = True
    cfg = ExperimentConfig.from_dict(raw)
    if args.out:
        cfg.out = args.out
    report = run_experiment(cfg)
    if args.json_out:
        with open(args.json_out, "w", encoding="utf-8") as fh:
            fh.write(report.to_json() + "\n")
    if cfg.out:
        write_csv([report], cfg.out)
    else:
        print(MetricsReport.csv_header())
        print(report.csv_row())
    return EXIT_OK


def _cmd_sweep(args: argparse.Namespace) -> int:
    raw = _load_json(args.config)
    grid = _load_json(args.grid)
    reports = sweep(raw, grid)
    if args.out:
        write_csv(reports, args.out)
    else:
        print(MetricsReport.csv_header())
        for report in reports:
            print(report.csv_row())
    return EXIT_OK


def _cmd_stats(args: argparse.Namespace) -> int:
    w = load_msrc(args.trace, args.page_size)
    s = workload_stats(w)
    print(f"requests: {len(w)}")
    print(f"write_fraction: {s.write_fraction:.4f}")
    print(f"read_fraction: {s.read_fraction:.4f}")
    print(f"avg_request_size_pages: {s.avg_request_size_pages:.2f}")
    print(f"avg_access_count: {s.avg_access_count:.2f}")
    print(f"unique_pages: {s.unique_pages}")
    return EXIT_OK


def _cmd_synth(args: argparse.Namespace) -> int:
    try:
        kind = SynthKind(args.kind)
    except ValueError:
        raise ConfigError(f"unknown kind {args.kind!r}; choose from "
                          f"{[k.value for k in SynthKind]}") from None
    w = synth_trace(kind, args.n, args.pages, args.seed, args.page_size)
    dump_msrc(w, args.out)
    print(f"wrote {len(w)} requests to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tiersim",
                                     description="Hybrid storage trace replay and placement policies")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run one experiment from a JSON config")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--policy", help="override policy name")
    p_run.add_argument("--seed", type=int)
    p_run.add_argument("--deterministic", action="store_true",
                       help="force the single-threaded train/decide interleaving")
    p_run.add_argument("--out", help="write the CSV report here")
    p_run.add_argument("--json-out", help="also write a JSON report with the loss curve")
    p_run.set_defaults(func=_cmd_run)

    p_sweep = sub.add_parser("sweep", help="run a config grid")
    p_sweep.add_argument("--config", required=True)
    p_sweep.add_argument("--grid", required=True,
                         help="JSON of dotted-config-path -> list of values")
    p_sweep.add_argument("--out")
    p_sweep.set_defaults(func=_cmd_sweep)

    p_stats = sub.add_parser("stats", help="print workload statistics for a trace")
    p_stats.add_argument("--trace", required=True)
    p_stats.add_argument("--page-size", type=int, default=4096)
    p_stats.set_defaults(func=_cmd_stats)

    p_synth = sub.add_parser("synth", help="generate a synthetic trace CSV")
    p_synth.add_argument("--kind", required=True)
    p_synth.add_argument("--n", type=int, required=True)
    p_synth.add_argument("--pages", type=int, required=True)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--page-size", type=int, default=4096)
    p_synth.add_argument("--out", required=True)
    p_synth.set_defaults(func=_cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TraceError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return EXIT_TRACE
    except FileNotFoundError as exc:
        print(f"trace error: {exc}", file=sys.stderr)
        return EXIT_TRACE


if __name__ == "__main__":
    sys.exit(main())
