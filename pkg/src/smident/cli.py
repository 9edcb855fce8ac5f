"""Command line front end.

    smident generate --config cfg.json
    smident estimate --config cfg.json
    smident identify --config cfg.json
    smident report   --config cfg.json
    smident all      --config cfg.json

Without --config the built-in benchmark configuration is used.  Individual
keys can be overridden with repeated --set key=value (values parsed as JSON
first, then as plain strings).  Exit codes: 0 success, 2 configuration
error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict

from .errors import ConfigError, NumericalError
from .pipeline import (ExperimentConfig, cmd_estimate, cmd_generate,
                       cmd_identify, cmd_report, run_all)


def _apply_overrides(cfg: ExperimentConfig, pairs) -> ExperimentConfig:
    data = asdict(cfg)
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"--set expects key=value, got {pair!r}")
        key, _, raw = pair.partition("=")
        if key not in data:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            data[key] = json.loads(raw)
        except json.JSONDecodeError:
            data[key] = raw
    cfg = ExperimentConfig(**data)
    cfg.validate()
    return cfg


def _load_config(args) -> ExperimentConfig:
    if args.config is not None:
        cfg = ExperimentConfig.from_json(args.config)
    else:
        cfg = ExperimentConfig()
    if args.out is not None:
        cfg.out_dir = args.out
    return _apply_overrides(cfg, args.set)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="smident",
        description="Set-membership identification of multi-step predictors "
                    "with guaranteed simulation error bounds.")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in [
            ("generate", "simulate or ingest data and write id/val records"),
            ("estimate", "estimate noise bound, order and decay envelope"),
            ("identify", "fit all models and their guaranteed error bounds"),
            ("report", "evaluate validation errors against the bounds"),
            ("all", "run every stage in sequence")]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="experiment configuration JSON")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a single config key (repeatable)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = _load_config(args)
        if args.command == "generate":
            cmd_generate(cfg)
        elif args.command == "estimate":
            cmd_estimate(cfg)
        elif args.command == "identify":
            cmd_identify(cfg)
        elif args.command == "report":
            summary = cmd_report(cfg)
            json.dump(summary["table"], sys.stdout, indent=2, sort_keys=True)
            print()
        elif args.command == "all":
            summary = run_all(cfg)
            json.dump(summary["table"], sys.stdout, indent=2, sort_keys=True)
            print()
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
