"""Command line entry point.

Option precedence, highest first: command line flags, the --config file, the VQFORGE_SEED
environment variable (seed only), built-in defaults.
"""
import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional

from .errors import ConfigError, TrainingDivergenceError, VqForgeError
from .stages import ExperimentConfig, read_config_dict
from .stages.ablation_stage import AblationStage
from .stages.matched_stage import MatchedStage
from .stages.run_dir import summarize_run_dirs
from .stages.sweep_stage import SweepStage, read_sweep_mse, summarize_trends
from .stages.train_stage import TrainStage, evaluate_checkpoint, reconstruct_image
from .tasks.pipeline import ARCHITECTURES, SINGLE

logger = logging.getLogger(__name__)

SEED_ENV_VAR = "VQFORGE_SEED"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
MAX_SEED = 2**64 - 1

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_DIVERGED = 2


class _ArgumentParser(argparse.ArgumentParser):
    """Parser whose usage errors exit with EXIT_INVALID instead of argparse's 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(f"{self.prog}: {message}")


def _seed(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= value <= MAX_SEED:
        raise argparse.ArgumentTypeError(f"seed must be in [0, 2^64), got {value}")

    return value


def build_parser() -> argparse.ArgumentParser:
    common = _ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON experiment config")
    common.add_argument("--seed", type=_seed, help=f"training seed, falls back to ${SEED_ENV_VAR}")
    common.add_argument("--out", help="output directory for every artifact")
    common.add_argument("--arch", choices=ARCHITECTURES, help="architecture to train")
    common.add_argument("--k", type=int, help="codebook size of the trained architecture (per level for hier)")
    common.add_argument("--d", type=int, help="code dimension of the trained architecture")
    common.add_argument("--no-reset", action="store_true", help="disable dead code reset")
    common.add_argument("--no-data-init", action="store_true", help="initialize codebooks without data")
    common.add_argument("--steps", type=int, help="training steps")
    common.add_argument("--batch", type=int, help="batch size")
    common.add_argument("--jobs", type=int, help="worker processes, default: number of cores")
    common.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    common.add_argument("--quiet", action="store_true", help="warnings only, no progress bars")

    parser = _ArgumentParser(prog="vqforge", description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    commands = parser.add_subparsers(dest="command", required=True, parser_class=_ArgumentParser)

    train = commands.add_parser("train", parents=[common], help="train one model")
    train.add_argument("--matched", action="store_true", help="train both architectures and compare them")

    evaluate = commands.add_parser("eval", parents=[common], help="evaluate a checkpoint on the held-out images")
    evaluate.add_argument("--ckpt", required=True)

    reconstruct = commands.add_parser("reconstruct", parents=[common], help="reconstruct one image")
    reconstruct.add_argument("--ckpt", required=True)
    reconstruct.add_argument("--in", dest="in_path", required=True, help="P5 or P6 input image")
    reconstruct.add_argument("--out-img", required=True, help="output image path")

    sweep = commands.add_parser("sweep", parents=[common], help="single-level K x D grid sweep")
    sweep.add_argument("--matched", action="store_true", help="only run cells on the reference discrete budget")
    sweep.add_argument("--thresholds", action="store_true", help="sweep the dead code threshold instead")

    ablate = commands.add_parser("ablate", parents=[common], help="collapse intervention ablation")
    ablate.add_argument("--adversarial", action="store_true", help="non-data arms start with every code at one point")
    ablate.add_argument("--dim-reduction", action="store_true", help="also run the dimension reduction arm")

    commands.add_parser("report", parents=[common], help="summarize the run directories under --out")

    return parser


def build_config(args: argparse.Namespace) -> ExperimentConfig:
    data: Dict[str, Any] = read_config_dict(args.config) if args.config else {}

    schedule = data.get("schedule") or {}
    env_seed = os.environ.get(SEED_ENV_VAR)
    if isinstance(schedule, dict) and "seed" not in schedule and env_seed is not None:
        try:
            data["schedule"] = {**schedule, "seed": _seed(env_seed)}
        except argparse.ArgumentTypeError as error:
            raise ConfigError(f"{SEED_ENV_VAR}: {error}") from None

    config = ExperimentConfig.from_dict(data)
    return apply_flags(config, args)


def apply_flags(config: ExperimentConfig, args: argparse.Namespace) -> ExperimentConfig:
    schedule_changes: Dict[str, Any] = {}
    if args.seed is not None:
        schedule_changes["seed"] = args.seed
    if args.steps is not None:
        schedule_changes["steps"] = args.steps
    if args.batch is not None:
        schedule_changes["batch_size"] = args.batch
    if args.no_reset:
        schedule_changes["dead_reset"] = False
    if args.no_data_init:
        schedule_changes["data_init"] = False
    if args.quiet:
        schedule_changes["progress"] = False
    elif args.command == "train":
        schedule_changes["progress"] = True

    changes: Dict[str, Any] = {"schedule": replace(config.schedule, **schedule_changes)}
    if args.seed is not None:
        # An explicit seed replaces the seed list of the config file
        changes["seeds"] = [args.seed]
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.arch is not None:
        changes["architecture"] = args.arch
    if args.jobs is not None:
        changes["jobs"] = args.jobs
    if getattr(args, "adversarial", False):
        changes["collapse_init"] = "adversarial"
    config = replace(config, **changes)

    if args.command == "sweep":
        grid = config.sweep
        if args.k is not None:
            grid = replace(grid, codebook_sizes=[args.k])
        if args.d is not None:
            grid = replace(grid, code_dims=[args.d])
        return replace(config, sweep=replace(grid, matched=grid.matched or args.matched))

    if args.k is None and args.d is None:
        return config

    if config.architecture == SINGLE:
        single = config.budget_spec().single
        k = single.codebook_size if args.k is None else args.k
        d = single.code_dim if args.d is None else args.d
        return replace(config, budget=config.budget.with_single(k, d))

    budget_changes = {"codebook_size": args.k, "code_dim": args.d}
    budget = replace(config.budget, **{key: value for key, value in budget_changes.items() if value is not None})

    return replace(config, budget=budget)


def emit(record: Dict[str, Any]) -> None:
    print(json.dumps(record, sort_keys=True), flush=True)


def run_command(args: argparse.Namespace) -> None:
    config = build_config(args)

    if args.command == "report":
        root = Path(config.out_dir)
        for summary in summarize_run_dirs(root):
            emit(summary)
        if (root / "sweep").is_dir():
            emit({"trends": summarize_trends(read_sweep_mse(root / "sweep"))})
        return

    if args.command == "reconstruct":
        emit(reconstruct_image(args.ckpt, args.in_path, args.out_img))
        return

    if args.command == "eval":
        emit(evaluate_checkpoint(config, args.ckpt))
        return

    if args.command == "train":
        stage = MatchedStage() if args.matched else TrainStage()
        stage.set_config(config)
        report = stage.run()
        if args.matched:
            for pair in report["pairs"]:
                emit(pair)
            emit({key: value for key, value in report.items() if key != "pairs"})
        else:
            emit(report)
        return

    if args.command == "sweep":
        stage = SweepStage(thresholds=args.thresholds)
        stage.set_config(config)
        report = stage.run()
        if args.thresholds:
            for row in report["thresholds"]:
                emit(row)
            return

        cells = report["cells"]
        if cells and all(cell["status"] == "skipped" for cell in cells):
            raise ConfigError(f"no feasible sweep cell: {cells[0]['reason']}")
        for cell in cells:
            emit(cell)
        emit({"trends": report["trends"], "seed_trends": report["seed_trends"]})
        return

    stage = AblationStage(with_reduction=args.dim_reduction)
    stage.set_config(config)
    report = stage.run()
    for row in report["ablation"]["results"]:
        emit(row)
    emit({"summary": report["ablation"]["summary"]})
    if "dimension_reduction" in report:
        for row in report["dimension_reduction"]["results"]:
            emit(row)


def configure_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(stream=sys.stderr, format=LOG_FORMAT, level=level, force=True)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as error:
        print(error, file=sys.stderr)
        return EXIT_INVALID
    except SystemExit as exit_:
        return EXIT_OK if not exit_.code else EXIT_INVALID

    configure_logging(args.verbose, args.quiet)
    try:
        run_command(args)
    except TrainingDivergenceError as error:
        logger.error("%s", error)
        return EXIT_DIVERGED
    except VqForgeError as error:
        logger.error("%s", error)
        return EXIT_INVALID
    except OSError as error:
        logger.error("%s", error)
        return EXIT_INVALID

    return EXIT_OK


def run() -> None:
    sys.exit(main())


if __name__ == "__main__":
    run()
