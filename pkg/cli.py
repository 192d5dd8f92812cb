#!/usr/bin/env python3
"""
AOSPR Routing Lab - command line
================================
Usage:
    python cli.py run configs/stochastic_chains.json
    python cli.py run configs/adversarial_layered.json --out results/adv --workers 4
    python cli.py sweep configs/stochastic_chains.json --param policies.0.probe.budget=1,2,3
    python cli.py validate configs/mixed_layered.json
    python cli.py bench --out results/bench

Exit codes: 0 ok, 2 config error, 3 runtime invariant violation.
"""

import argparse
import logging
import sys
from datetime import datetime

from pydantic import ValidationError

from config import LOG_DATEFMT, LOG_FORMAT, LOG_LEVEL, RESULTS_DIR
from database import SessionLocal, init_db
from experiment_config import format_errors, load_config, parse_sweep, read_document
from harness import bench, record_run, run, sweep

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3


# ─────────────────────────────────────────────
#  Subcommands
# ─────────────────────────────────────────────

def cmd_run(args) -> int:
    config = load_config(args.config)
    result = run(config, output_dir=args.out, workers=args.workers)
    if args.record:
        init_db()
        db = SessionLocal()
        try:
            row = record_run(db, config, result)
            logger.info(f"[RUN] registered as run #{row.id}")
        finally:
            db.close()
    for name, path in result.paths.items():
        logger.info(f"[RUN] {name}: {path}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    doc = read_document(args.config)
    key, values = parse_sweep(args.param)
    out = args.out or f"{RESULTS_DIR}/sweep_{datetime.now():%Y%m%d_%H%M%S}"
    frame = sweep(doc, key, values, out, workers=args.workers)
    logger.info(f"[RUN] sweep over {key}: {len(values)} point(s), {len(frame)} row(s) in {out}/sweep.csv")
    return EXIT_OK


def cmd_validate(args) -> int:
    config = load_config(args.config)
    labels = ', '.join(p.name for p in config.policies)
    logger.info(f"{args.config}: ok ({config.regime.kind} regime, T={config.horizon}, policies: {labels})")
    return EXIT_OK


def cmd_bench(args) -> int:
    frame = bench(out_dir=args.out, rounds=args.rounds, seed=args.seed, check=args.check)
    for row in frame.itertuples(index=False):
        logger.info(f"[BENCH] {row.mode:<9} n={row.n:<4} k={row.k}  {row.seconds_per_round * 1e3:.3f} ms/round")
    return EXIT_OK


# ─────────────────────────────────────────────
#  Main
# ─────────────────────────────────────────────

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description='Adaptive shortest-path routing experiments')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('run', help='Run one experiment config')
    p.add_argument('config')
    p.add_argument('--out', default=None, help='Output directory (default: RESULTS_DIR/<name>)')
    p.add_argument('--workers', type=int, default=None, help='Parallel repetitions')
    p.add_argument('--record', action='store_true', help='Store the run in the registry database')
    p.set_defaults(handler=cmd_run)

    p = sub.add_parser('sweep', help='Run a config once per parameter value')
    p.add_argument('config')
    p.add_argument('--param', required=True, help='Dotted key and values, e.g. policies.0.probe.budget=1,2')
    p.add_argument('--out', default=None)
    p.add_argument('--workers', type=int, default=None)
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser('validate', help='Check a config without running it')
    p.add_argument('config')
    p.set_defaults(handler=cmd_validate)

    p = sub.add_parser('bench', help='Per-round sampling cost of the subset DP')
    p.add_argument('--out', default=None)
    p.add_argument('--rounds', type=int, default=20)
    p.add_argument('--seed', type=int, default=0)
    p.add_argument('--check', action='store_true',
                   help='Exit 3 unless cost growth per doubling is < 2.5 and the DP beats enumeration by > 10x')
    p.set_defaults(handler=cmd_bench)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=LOG_LEVEL, format=LOG_FORMAT, datefmt=LOG_DATEFMT)
    args = build_parser().parse_args(argv)
    try:
        return args.handler(args)
    except ValidationError as e:
        for line in format_errors(e):
            logger.error(line)
        return EXIT_CONFIG
    except ValueError as e:
        logger.error(f"{type(e).__name__}: {e}")
        return EXIT_CONFIG
    except RuntimeError as e:
        logger.error(f"{type(e).__name__}: {e}", exc_info=True)
        return EXIT_RUNTIME


if __name__ == '__main__':
    sys.exit(main())
