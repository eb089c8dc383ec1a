"""Command-line entry point: ``vflsim run|sweep|baseline|validate <config>``."""

import argparse
import logging
import sys
from typing import List, Optional, Sequence

from . import __version__
from .config import load_config, parse_axis_value, parse_list
from .errors import ConfigError, VFLSimError
from .experiment import run_baseline, run_experiment, run_sweep, write_report, write_sweep

logger = logging.getLogger(__name__)

LOG_LEVELS = (logging.WARNING, logging.INFO, logging.DEBUG)


def _seeds(text: Optional[str]) -> Optional[List[int]]:
    if text is None:
        return None
    try:
        return [int(item) for item in parse_list(text)]
    except ValueError:
        raise ConfigError("sweep.seeds", f"{text!r} is not a comma-separated list of integers") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vflsim",
        description="Simulate vertical federated learning under a clean-label backdoor attack.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0, help="-v for progress, -vv for per-round detail")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="run the experiment once per configured seed")
    run.add_argument("config", help="experiment YAML file")
    run.add_argument("--seeds", help="comma-separated seeds overriding the config")

    baseline = commands.add_parser("baseline", help="run the experiment with the attack removed")
    baseline.add_argument("config", help="experiment YAML file")
    baseline.add_argument("--seeds", help="comma-separated seeds overriding the config")

    sweep = commands.add_parser("sweep", help="vary one parameter over several values and seeds")
    sweep.add_argument("config", help="experiment YAML file")
    sweep.add_argument("--axis", required=True, help="parameter to vary, e.g. budget or dp_variance")
    sweep.add_argument("--values", required=True, help="comma-separated axis values")
    sweep.add_argument("--seeds", help="comma-separated seeds overriding the config")
    sweep.add_argument("--workers", type=int, default=1, help="experiments to run in parallel")

    validate = commands.add_parser("validate", help="check a config file without running anything")
    validate.add_argument("config", help="experiment YAML file")
    return parser


def _run(args: argparse.Namespace, clean: bool) -> None:
    config = load_config(args.config)
    runner = run_baseline if clean else run_experiment
    for seed in _seeds(args.seeds) or config.seeds:
        report = runner(config, seed)
        path = write_report(report, config.output)
        asr = "n/a" if report.final_asr is None else f"{report.final_asr:.4f}"
        print(f"seed {seed}: MTA {report.final_mta:.4f}  ASR {asr}  -> {path}")


def _sweep(args: argparse.Namespace) -> None:
    config = load_config(args.config)
    values = [parse_axis_value(args.axis, text) for text in parse_list(args.values)]
    result = run_sweep(config, args.axis, values, _seeds(args.seeds), workers=args.workers)
    runs, summary = write_sweep(result, config.name, config.output)
    print(result.summary().to_string(index=False))
    print(f"-> {runs}\n-> {summary}")


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=LOG_LEVELS[min(args.verbose, len(LOG_LEVELS) - 1)],
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "validate":
            config = load_config(args.config)
            print(f"{args.config}: OK ({config.name}, {config.total_rounds} rounds)")
        elif args.command == "sweep":
            _sweep(args)
        else:
            _run(args, clean=args.command == "baseline")
    except ConfigError as exc:
        print(f"vflsim: invalid config: {exc}", file=sys.stderr)
        return 2
    except VFLSimError as exc:
        print(f"vflsim: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
