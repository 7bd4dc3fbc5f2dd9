"""Command-line entry point: run, validate, and report subcommands.

Exit codes: 0 success, 2 configuration error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import analysis
from .scenario import ConfigError, ScenarioRunner, load_scenario, rederive_reports

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


def _parse_sweep(arg: str) -> range:
    # accepted form: seeds=a..b (inclusive)
    try:
        key, _, value = arg.partition("=")
        if key != "seeds":
            raise ValueError
        lo, _, hi = value.partition("..")
        return range(int(lo), int(hi) + 1)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected seeds=a..b, got {arg!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="aqlogsim",
        description="Scenario-driven simulator for solar/battery air-quality dataloggers",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a scenario and write its artifacts")
    p_run.add_argument("config", help="scenario file (TOML)")
    p_run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    p_run.add_argument("--duration", type=int, default=None, metavar="MS", help="override duration")
    p_run.add_argument("--out", default=None, metavar="DIR", help="override the output directory")
    p_run.add_argument("--sweep", type=_parse_sweep, default=None, metavar="seeds=a..b",
                       help="run one simulation per seed into DIR/seed_<n>/")

    p_val = sub.add_parser("validate", help="check a scenario file without running it")
    p_val.add_argument("config")

    p_rep = sub.add_parser("report", help="re-derive reports from an existing run directory")
    p_rep.add_argument("run_dir")
    return parser


def cmd_run(args) -> int:
    try:
        config = load_scenario(args.config)
    except ConfigError as exc:
        for diag in exc.diagnostics:
            print(f"config error: {diag}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        if args.sweep is not None:
            base = Path(args.out or config.output_dir or "run_output")
            for seed in args.sweep:
                runner = ScenarioRunner(
                    config, out_dir=base / f"seed_{seed}", seed=seed, duration_ms=args.duration
                )
                runner.run()
                print(f"seed {seed}: wrote {runner.out_dir}")
        else:
            runner = ScenarioRunner(
                config, out_dir=args.out, seed=args.seed, duration_ms=args.duration
            )
            runner.run()
            sys.stdout.write(analysis.render_table(runner.reports))
            print(f"artifacts written to {runner.out_dir}")
    except Exception as exc:  # noqa: BLE001 - report and map to exit code
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_validate(args) -> int:
    try:
        load_scenario(args.config)
    except ConfigError as exc:
        for diag in exc.diagnostics:
            print(f"config error: {diag}", file=sys.stderr)
        return EXIT_CONFIG
    print("ok")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not (run_dir / "manifest.json").is_file():
        print(f"config error: {run_dir} has no manifest.json", file=sys.stderr)
        return EXIT_CONFIG
    try:
        payload, reports = rederive_reports(run_dir)
        (run_dir / "report.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        (run_dir / "report.txt").write_text(analysis.render_table(reports))
        print(json.dumps(payload, indent=2, sort_keys=True))
    except Exception as exc:  # noqa: BLE001
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"run": cmd_run, "validate": cmd_validate, "report": cmd_report}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
