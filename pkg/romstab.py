#!/usr/bin/env python3
"""
romstab: POD-Galerkin ROMs with a Lyapunov closure tuned by extremum seeking.

Usage:
    python romstab.py run --preset burgers-small --out runs/burgers
    python romstab.py run --config my.json --seed 3
    python romstab.py simulate --preset boussinesq-structured   # stop after snapshots
    python romstab.py pod|rom|tune ...                          # stop after that stage
    python romstab.py report --out runs/burgers                 # CSVs + REPORT.md
    python romstab.py run --preset burgers-small --sweep sweep.json --out runs/sweep
    python romstab.py run --preset burgers-small --cache        # reuse matching snapshots

Exit status: 0 on success, 1 when a stage fails, 2 for an invalid configuration.
Log level comes from -v (DEBUG) or the ROMSTAB_LOG environment variable.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import config as cfgmod
from config import ConfigError
from pipeline import MissingArtifactsError, StageFailed, report, run_pipeline, run_sweep

log = logging.getLogger("romstab")

COMMANDS = ("simulate", "pod", "rom", "tune", "run", "report")

EXIT_OK = 0
EXIT_STAGE_FAILED = 1
EXIT_BAD_CONFIG = 2


def setup_logging(verbose: bool) -> None:
    level_name = "DEBUG" if verbose else os.environ.get("ROMSTAB_LOG", "INFO").upper()
    logging.basicConfig(
        level=getattr(logging, level_name, logging.INFO),
        format="%(asctime)s [%(name)s] %(levelname)s: %(message)s",
        datefmt="%H:%M:%S",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="romstab: stabilised POD-Galerkin ROMs with MES auto-tuning")
    parser.add_argument("command", choices=COMMANDS, help="stage to run up to, or 'report'")
    source = parser.add_mutually_exclusive_group()
    source.add_argument("--config", type=Path, help="experiment config JSON")
    source.add_argument("--preset", choices=sorted(cfgmod.PRESETS),
                        help="named experiment preset (default: burgers-small)")
    parser.add_argument("--out", type=Path, default=None,
                        help="run directory (default: runs/<config name>)")
    parser.add_argument("--seed", type=int, default=None, help="override truth.seed")
    parser.add_argument("--sweep", type=Path, default=None,
                        help="JSON list of dotted-key overrides, one run each")
    parser.add_argument("--workers", type=int, default=None,
                        help="sweep pool size (default: ROMSTAB_WORKERS or CPU count)")
    parser.add_argument("--cache", action="store_true",
                        help="reuse snapshots in --out when the truth config matches")
    parser.add_argument("--verbose", "-v", action="store_true", help="enable debug logging")
    return parser


def resolve_config(args: argparse.Namespace) -> cfgmod.ExperimentConfig:
    if args.config is not None:
        cfg = cfgmod.load(args.config)
    else:
        cfg = cfgmod.preset(args.preset or "burgers-small")
    if args.seed is not None:
        cfg.truth = dataclasses.replace(cfg.truth, seed=args.seed)
    return cfgmod.validate(cfg)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)

    if args.command == "report":
        if args.out is None:
            log.error("report needs --out pointing at a finished run directory")
            return EXIT_BAD_CONFIG
        try:
            report(args.out)
        except MissingArtifactsError as exc:
            log.error("%s", exc)
            return EXIT_STAGE_FAILED
        return EXIT_OK

    try:
        cfg = resolve_config(args)
        out = args.out or Path("runs") / cfg.name
        if args.sweep is not None:
            overrides = cfgmod.load_sweep(args.sweep)
            failed = run_sweep(cfg, overrides, out, workers=args.workers)
            return EXIT_STAGE_FAILED if failed else EXIT_OK
        summary = run_pipeline(cfg, out, until=args.command, use_cache=args.cache)
    except ConfigError as exc:
        log.error("Invalid configuration: %s", exc)
        return EXIT_BAD_CONFIG
    except StageFailed as exc:
        log.error("%s; partial outputs and MANIFEST.json are in %s", exc, out)
        return EXIT_STAGE_FAILED

    if summary:
        print(json.dumps({k: summary[k] for k in ("Q_nominal", "Q_tuned", "improvement_ratio",
                                                  "mu_opt", "stability")}, indent=2))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
