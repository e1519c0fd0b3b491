"""
Command-line entry point for skill bank curation, evaluation, cache maintenance and reports
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

import pandas as pd
from pydantic import ValidationError

from ..libs.curation_loop import CurationLoop, RunConfig, load_run_config
from ..libs.errors import (BankParseError, BankValidationError, ConfigError, InvalidInputError,
                           WorldValidationError)
from ..libs.objectives import evaluate_bank, profile_report
from ..libs.replay_cache import ReplayCache
from ..libs.retrieval import HybridRetriever
from ..libs.rollout import SPLITS, SyntheticWorker, generate_world, load_world, save_world
from ..libs.skill_model import HashingEmbedder, load_bank
from ..libs.utils import dumps_json, load_env, parse_csv_list, read_json_lines, write_json

# Configure logging
logging.basicConfig(
    level=logging.INFO,
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2

REPORT_COLUMNS = ['round', 'bank_size', 'util', 'div', 'cov', 'winner_is_null', 'cache_hit_rate',
                  'test_success_rate']

USAGE_ERRORS = (ConfigError, BankParseError, BankValidationError, WorldValidationError, InvalidInputError,
                FileNotFoundError, ValidationError)


def _base_config(config_path: Optional[str]) -> RunConfig:
    return load_run_config(config_path) if config_path else RunConfig()


def _world_for(config: RunConfig, world_path: Optional[str] = None):
    path = world_path or config.world_path
    if path:
        return load_world(path)
    return generate_world(config.world.n_tags, config.world.n_tasks_per_split,
                          config.world.solvable_fraction, config.seed)


def _worker_for(config: RunConfig, world_path: Optional[str] = None) -> SyntheticWorker:
    return SyntheticWorker(_world_for(config, world_path), success_threshold=config.success_threshold,
                           max_steps=config.max_steps)


def curate(args) -> int:
    """Run the curation loop and write bank.json, rounds.jsonl, timings.jsonl and cache_stats.json"""
    config = _base_config(args.config)
    overrides = {
        'cache_dir': args.cache_dir,
        'seed': args.seed,
        'rounds': args.rounds,
        'candidates': args.candidates,
        'epsilon_tol': args.epsilon,
        'world_path': args.world,
        'enabled_objectives': parse_csv_list(args.objectives) if args.objectives else None,
        'enabled_edit_ops': parse_csv_list(args.edit_ops) if args.edit_ops else None,
    }
    if args.proposer:
        mode = 'remote' if args.proposer == 'remote' else 'rule_based'
        overrides['proposer'] = config.proposer.model_copy(update={'mode': mode})
    config = config.with_overrides(**overrides)
    if config.proposer.mode == 'remote':
        load_env()

    world = _world_for(config)
    loop = CurationLoop.from_config(config, world=world, out_dir=args.out)
    result = loop.run()

    print(f"Final bank {result.bank.bank_id}: {result.bank.size} skills after {len(result.reports)} rounds")
    if result.baseline_success_rate is not None:
        print(f"Test split success rate: {result.baseline_success_rate:.4f} without retrieval, "
              f"{result.initial_success_rate:.4f} with the cold-start bank")
    for report in result.reports:
        marker = ' (carried forward)' if report.winner_is_null else ''
        print(f"  round {report.round:>2} | size {report.bank_size:>3} | util {report.profile.util:.4f} "
              f"| div {report.profile.div:.4f} | cov {report.profile.cov:.4f}"
              f"{_test_rate(report)}{marker}")
    return EXIT_OK


def _test_rate(report) -> str:
    return '' if report.test_success_rate is None else f" | test {report.test_success_rate:.4f}"


def evaluate(args) -> int:
    """Evaluate one bank on a split of a world file and print its profile report"""
    config = _base_config(args.config)
    config = config.with_overrides(cache_dir=args.cache_dir)
    world = load_world(args.split)
    embedder = HashingEmbedder(dimension=config.embedding_dim)
    bank = load_bank(args.bank, embedder=embedder)
    tasks = world.split(args.split_name)

    worker = SyntheticWorker(world, success_threshold=config.success_threshold, max_steps=config.max_steps)
    cache = ReplayCache(config.cache_dir, enabled=config.use_cache)
    retriever = HybridRetriever(config.retrieval, embedder)
    evaluation = evaluate_bank(bank, tasks, worker, retriever, cache, config.enabled_objectives,
                               config.epsilon_reg, config.max_workers)
    report = profile_report(evaluation, bank)

    if args.out:
        write_json(args.out, report)
    sys.stdout.write(dumps_json(report).decode('utf-8'))
    return EXIT_OK


def inspect_cache(args) -> int:
    """Print entry counts per worker version and, given a config, how many entries are stale"""
    cache = ReplayCache(args.cache_dir)
    current = None
    if args.config or args.world:
        current = _worker_for(_base_config(args.config), args.world).version_tag
    summary = cache.describe(current_version=current)
    if current is not None:
        summary['current_version'] = current
    sys.stdout.write(dumps_json(summary).decode('utf-8'))
    return EXIT_OK


def purge_cache(args) -> int:
    """Delete cache entries written by any worker version other than the configured one"""
    if not Path(args.cache_dir).is_dir():
        raise FileNotFoundError(f"Cache directory not found: {args.cache_dir}")
    current = _worker_for(_base_config(args.config), args.world).version_tag
    removed = ReplayCache(args.cache_dir).purge_stale(current)
    print(f"Removed {removed} stale entries from {args.cache_dir}")
    return EXIT_OK


def report(args) -> int:
    """Transcribe rounds.jsonl into a CSV of the per-round series"""
    try:
        records = read_json_lines(args.rounds)
        rows = [{column: record[column] for column in REPORT_COLUMNS} for record in records]
    except (ValueError, KeyError, TypeError) as e:
        raise ConfigError(f"Malformed rounds file {args.rounds}: {e}") from e

    frame = pd.DataFrame(rows, columns=REPORT_COLUMNS)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(args.out, index=False)
    print(f"Wrote {len(frame)} rounds to {args.out}")
    return EXIT_OK


def gen_world(args) -> int:
    """Generate a deterministic synthetic world file"""
    world = generate_world(args.n_tags, args.n_tasks_per_split, args.solvable_fraction, args.seed)
    path = save_world(world, args.out)
    print(f"Wrote world with {len(world.tags)} tags and {len(world.tasks)} tasks to {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="skill_curator",
        description="Curate a skill bank by Pareto-aware propose-then-verify rounds",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Examples:
  python -m skill_curator.apps.cli gen-world --n-tags 4 --n-tasks-per-split 8 --out world.json
  python -m skill_curator.apps.cli curate --config run.json --world world.json --out runs/a
  python -m skill_curator.apps.cli curate --out runs/b --objectives util,div --edit-ops add,remove
  python -m skill_curator.apps.cli eval --bank runs/a/bank.json --split world.json --config run.json
  python -m skill_curator.apps.cli report --rounds runs/a/rounds.jsonl --out runs/a/rounds.csv
  python -m skill_curator.apps.cli purge-cache --cache-dir .cache --config run.json
        """
    )
    parser.add_argument("--verbose", action="store_true", help="Log at DEBUG level")
    commands = parser.add_subparsers(dest="command", required=True)

    curate_parser = commands.add_parser("curate", help="Run the curation loop")
    curate_parser.add_argument("--config", help="RunConfig JSON file (defaults apply when omitted)")
    curate_parser.add_argument("--out", required=True, help="Output directory")
    curate_parser.add_argument("--world", help="Synthetic world file (overrides world_path)")
    curate_parser.add_argument("--cache-dir", help="Persist the replay cache in this directory")
    curate_parser.add_argument("--seed", type=int)
    curate_parser.add_argument("--rounds", type=int, help="Number of curation rounds")
    curate_parser.add_argument("--candidates", type=int, help="Candidate banks per round")
    curate_parser.add_argument("--epsilon", type=float, help="Utility tolerance of the tie pool")
    curate_parser.add_argument("--objectives", help="Comma separated subset of util,div,cov")
    curate_parser.add_argument("--edit-ops", help="Comma separated subset of add,rewrite,remove")
    curate_parser.add_argument("--proposer", choices=["rule", "remote"])
    curate_parser.set_defaults(handler=curate)

    eval_parser = commands.add_parser("eval", help="Evaluate a bank's objective profile")
    eval_parser.add_argument("--bank", required=True, help="Bank file")
    eval_parser.add_argument("--split", required=True, help="Synthetic world file holding the split")
    eval_parser.add_argument("--split-name", choices=list(SPLITS), default="query")
    eval_parser.add_argument("--config", help="RunConfig JSON file")
    eval_parser.add_argument("--cache-dir")
    eval_parser.add_argument("--out", help="Write the profile report JSON here")
    eval_parser.set_defaults(handler=evaluate)

    inspect_parser = commands.add_parser("inspect-cache", help="Summarize a replay cache directory")
    inspect_parser.add_argument("--cache-dir", required=True)
    inspect_parser.add_argument("--config", help="RunConfig JSON file defining the current worker")
    inspect_parser.add_argument("--world", help="Synthetic world file defining the current worker")
    inspect_parser.set_defaults(handler=inspect_cache)

    purge_parser = commands.add_parser("purge-cache", help="Delete stale-version cache entries")
    purge_parser.add_argument("--cache-dir", required=True)
    purge_parser.add_argument("--config", help="RunConfig JSON file defining the current worker")
    purge_parser.add_argument("--world", help="Synthetic world file defining the current worker")
    purge_parser.set_defaults(handler=purge_cache)

    report_parser = commands.add_parser("report", help="Write the per-round series as CSV")
    report_parser.add_argument("--rounds", required=True, help="rounds.jsonl of a curate run")
    report_parser.add_argument("--out", required=True, help="CSV output path")
    report_parser.set_defaults(handler=report)

    world_parser = commands.add_parser("gen-world", help="Generate a synthetic world file")
    world_parser.add_argument("--n-tags", type=int, default=4)
    world_parser.add_argument("--n-tasks-per-split", type=int, default=8)
    world_parser.add_argument("--solvable-fraction", type=float, default=0.25)
    world_parser.add_argument("--seed", type=int, default=42)
    world_parser.add_argument("--out", required=True, help="World file path")
    world_parser.set_defaults(handler=gen_world)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Main entry point with command line argument parsing"""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.verbose:
        logging.getLogger().setLevel(logging.DEBUG)

    try:
        return args.handler(args)
    except USAGE_ERRORS as e:
        logger.error(f"{args.command}: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:
        logger.error(f"{args.command} failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
