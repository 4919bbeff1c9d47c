"""Command-line entry point: run, verify, sweep, list-scenarios."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import SCENARIOS, ExperimentConfig, load_config
from .errors import ConfigError, InputError
from .runner import run_experiment, summarize, write_outputs
from .verify import run_checks

EXIT_OK, EXIT_FAILED, EXIT_CONFIG = 0, 1, 2


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gradcancel", description=__doc__)
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="execute one config file")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int, default=None, help="override the config seed")
    run.add_argument("--out", default=None, help="output directory (default: config 'out' or ./runs)")

    sub.add_parser("verify", help="run the built-in invariant checks")

    sweep = sub.add_parser("sweep", help="vary one config field over a list of values")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--field", required=True)
    sweep.add_argument("--values", required=True, help="comma-separated; each item parsed as JSON, else taken as a string")
    sweep.add_argument("--seed", type=int, default=None)
    sweep.add_argument("--out", default=None)

    sub.add_parser("list-scenarios", help="print registered scenario names")
    return p


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _resolve(cfg: ExperimentConfig, seed, out) -> tuple[ExperimentConfig, Path]:
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg, Path(out or cfg.out or "runs")


def _cmd_run(args) -> int:
    cfg, out = _resolve(load_config(args.config), args.seed, args.out)
    rec = run_experiment(cfg)
    csv_path, json_path = write_outputs(cfg, rec, out)
    print(f"wrote {csv_path} ({len(rec.rows)} rows) and {json_path}")
    return EXIT_OK


def _cmd_sweep(args) -> int:
    base, out = _resolve(load_config(args.config), args.seed, args.out)
    values = [_parse_value(v.strip()) for v in args.values.split(",") if v.strip()]
    if not values:
        raise ConfigError("--values is empty")
    cfgs = [base.with_field(args.field, v) for v in values]
    summary = {"field": args.field, "runs": []}
    for v, cfg in zip(values, cfgs):
        rec = run_experiment(cfg)
        csv_path, _ = write_outputs(cfg, rec, out, stem=f"{args.field}={v}")
        summary["runs"].append({"value": v, "csv": csv_path.name, "summary": summarize(cfg, rec)})
        print(f"wrote {csv_path}")
    (out / "sweep_summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True, default=float) + "\n")
    return EXIT_OK


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "list-scenarios":
            print("\n".join(SCENARIOS))
            return EXIT_OK
        if args.command == "verify":
            return EXIT_OK if run_checks() else EXIT_FAILED
        if args.command == "run":
            return _cmd_run(args)
        return _cmd_sweep(args)
    except (ConfigError, InputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


cli_main = main

if __name__ == "__main__":
    sys.exit(main())
