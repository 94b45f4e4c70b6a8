#!/usr/bin/env python3
"""
Command-line interface for the stochastic CGL Monte Carlo lab.

Exit codes: 0 success, 1 a check failed, 2 invalid configuration,
3 blow-up, 4 I/O error.
"""
import argparse
import logging
import os
import sys

from dotenv import load_dotenv

from ensemble.cli_io import (
    KINDS,
    ExperimentConfig,
    ResultRecord,
    load_config,
    run,
    with_overrides,
)
from trajectory.utils.errors import BlowUpError, ConfigError, DomainError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2
EXIT_BLOW_UP = 3
EXIT_IO = 4


def print_banner(kind: str):
    """Print the CLI banner."""
    print("\n" + "=" * 80)
    print(f"🌊 STOCHASTIC CGL MONTE CARLO LAB: {kind.upper()}")
    print("=" * 80)


def print_summary(record: ResultRecord):
    print(f"\n📋 Run {record.config_hash[:12]} ({record.kind})")
    for report in record.reports:
        marker = "✅" if report.passed else "❌"
        print(f"   {marker} {report.name}: {report.verdict}")
        for warning in report.warnings:
            print(f"      ⚠️  {warning}")
    print(f"\n💾 Outputs: {record.out_dir}")
    print(f"⏱️  Wall clock: {record.wall_clock:.1f}s")
    print("\n" + "=" * 80)


def setup_logging(level: str):
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s [%(levelname)s] %(message)s',
        handlers=[logging.StreamHandler()],
    )


def resolve_config(args) -> ExperimentConfig:
    """File, then environment, then flags."""
    config = load_config(args.config) if args.config else ExperimentConfig()
    seed = args.seed if args.seed is not None else os.getenv("CGL_SEED")
    return with_overrides(config, kind=args.command, seed=None if seed in (None, "") else int(seed))


def cmd_run(args) -> int:
    """Run one experiment kind."""
    print_banner(args.command)
    try:
        config = resolve_config(args)
    except ConfigError as e:
        print("❌ Invalid configuration:")
        for violation in e.violations:
            print(f"   • {violation}")
        return EXIT_CONFIG
    except ValueError as e:
        print(f"❌ Invalid override: {e}")
        return EXIT_CONFIG
    except OSError as e:
        print(f"❌ Cannot read configuration: {e}")
        return EXIT_IO

    workers = args.workers if args.workers is not None else int(os.getenv("CGL_WORKERS", "1"))
    out_root = args.out or os.getenv("CGL_OUT_DIR", "results")
    print(f"   • Seed: {config.run.seed}")
    print(f"   • Workers: {workers}")
    print(f"   • Grid: X = {config.grid.half_width}, n = {config.grid.nodes}")
    print(f"   • Ensemble: {config.run.ensemble_size} paths, horizon {config.run.horizon}")
    print("=" * 80)

    try:
        record = run(config, out_root, workers)
    except BlowUpError as e:
        logger.error(f"❌ {e}")
        print(f"❌ Blow-up at step {e.step}: ||u|| = {e.norm:.6g}; reduce RUN_DT")
        return EXIT_BLOW_UP
    except (ConfigError, DomainError) as e:
        print(f"❌ Invalid configuration: {e}")
        return EXIT_CONFIG
    except OSError as e:
        logger.error(f"❌ I/O failure: {e}")
        return EXIT_IO
    except Exception:
        logger.exception("❌ Unexpected error")
        raise

    print_summary(record)
    return EXIT_OK if record.verdict == "PASS" else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        description="Monte Carlo checks for the stochastic complex Ginzburg-Landau equation",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python cgl_cli.py validate
  python cgl_cli.py simulate --config configs/default.env --seed 7
  python cgl_cli.py mixing --workers 8 --out results
  python cgl_cli.py tails --config configs/tails.env --log-level DEBUG
        """,
    )
    subparsers = parser.add_subparsers(dest='command', help='Experiment kind')
    for kind in KINDS:
        sub = subparsers.add_parser(kind, help=f'Run the {kind} experiment')
        sub.add_argument('--config', help='dotenv-style experiment configuration')
        sub.add_argument('--seed', type=int, help='Experiment seed (overrides CGL_SEED)')
        sub.add_argument('--workers', type=int, help='Worker processes (overrides CGL_WORKERS)')
        sub.add_argument('--out', help='Output root directory (overrides CGL_OUT_DIR)')
        sub.add_argument('--log-level', help='Logging level (overrides CGL_LOG_LEVEL)')
    return parser


def main(argv=None) -> int:
    load_dotenv()
    parser = build_parser()
    args = parser.parse_args(argv)

    if not args.command:
        parser.print_help()
        return EXIT_FAIL

    setup_logging(args.log_level or os.getenv("CGL_LOG_LEVEL", "INFO"))
    return cmd_run(args)


if __name__ == "__main__":
    sys.exit(main())
