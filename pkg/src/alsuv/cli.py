"""Command line: ``python -m alsuv {run,ablate,sweep,diagnose,worldgen}``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from . import harness
from .config import (ConfigError, ExperimentConfig, config_from_dict, load_config, validate,
                     validate_sweep)
from .worldgen import build_world

log = logging.getLogger("alsuv")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="alsuv", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("run", "attack every identity, evaluate and write the report"),
        ("ablate", "n x averaging x validation grid"),
        ("sweep", "vary one hyperparameter and write long-format plot data"),
        ("diagnose", "curvature at averaged vs final latents plus loss slices"),
        ("worldgen", "build the world and write it to world.json"),
    ]:
        s = sub.add_parser(name, help=help_)
        s.add_argument("--config", metavar="PATH", help="JSON config; defaults when omitted")
        s.add_argument("--seed", type=int, help="override the master seed")
        s.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
        s.add_argument("--threads", type=int, default=None,
                       help="worker threads, 0 = one per core (fallback: ALSUV_THREADS, then 1)")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def _load(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else config_from_dict({})
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("--seed must be non-negative")
        cfg = dataclasses.replace(cfg, seed=args.seed)
        validate(cfg)
    return cfg


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _load(args)
        threads = harness.resolve_threads(args.threads)
        if args.command == "sweep":
            validate_sweep(cfg)
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return harness.EXIT_CONFIG

    if args.command == "worldgen":
        path = harness.write_world(build_world(cfg.world, cfg.seed), args.out)
        print(path)
        return harness.EXIT_OK

    if args.command in ("run", "diagnose"):
        if args.command == "diagnose" and not cfg.diagnostics.enabled:
            cfg = dataclasses.replace(
                cfg, diagnostics=dataclasses.replace(cfg.diagnostics, enabled=True))
        report = harness.run_experiment(cfg, threads)
        for path in harness.write_experiment(report, args.out):
            print(path)
        if report["failed"]:
            print(f"{len(report['failed'])} identities failed: {report['failed']}", file=sys.stderr)
            return harness.EXIT_PARTIAL
        return harness.EXIT_OK

    if args.command == "ablate":
        rows = harness.run_ablation(cfg, threads)
        print(harness.write_ablation(rows, args.out))
        return harness.EXIT_PARTIAL if any(r["failed"] for r in rows) else harness.EXIT_OK

    sweep = harness.run_sweep(cfg, threads)
    print(harness.write_sweep(cfg, sweep, args.out))
    return harness.EXIT_PARTIAL if sweep["failed"] else harness.EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
