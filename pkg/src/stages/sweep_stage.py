"""This module contains the single-level (K, D) grid sweep, its trend summaries and the dead code
threshold sweep."""
import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Tuple, Union

from ..errors import InfeasibleBudgetError
from ..tasks.pipeline import DISCRETE_BUDGET, SINGLE
from ..tools.worker_pool import run_jobs
from . import BudgetConfig, ExperimentConfig, Stage
from .run_dir import REPORT_FILE, find_run_dirs, write_json
from .runner import DIVERGED, OK, SKIPPED, ArmJob, ArmResult, run_arm

logger = logging.getLogger(__name__)

# An increase of MSE with K counts as a tolerated inversion up to this relative size
INVERSION_TOLERANCE = 0.02
MAX_INVERSIONS = 1
# The single-level latent has 5/4 of the hierarchical channels, an integer only for multiples of 4
CHANNEL_STEP = 4


@dataclass
class SweepCell:
    codebook_size: int
    code_dim: int
    seed: int
    status: str
    reason: str = ""
    result: Optional[ArmResult] = None

    @property
    def mse(self) -> Optional[float]:
        return self.result.mse if self.status == OK else None

    def to_row(self) -> Dict[str, Any]:
        row = {"codebook_size": self.codebook_size, "code_dim": self.code_dim, "seed": self.seed, "status": self.status}
        if self.reason:
            row["reason"] = self.reason
        if self.result is not None:
            row.update(self.result.to_row())

        return row


def mean_grid(values: Iterable[Tuple[Tuple[int, int], float]]) -> Dict[Tuple[int, int], float]:
    """Mean of the values collected for each (K, D); exactly rounded, so the order of the values is irrelevant."""
    collected: Dict[Tuple[int, int], List[float]] = {}
    for cell, value in values:
        collected.setdefault(cell, []).append(value)

    return {cell: math.fsum(group) / len(group) for cell, group in sorted(collected.items())}


@dataclass
class SweepResult:
    """Every requested (K, D) cell of every seed, trained or marked skipped or diverged with a reason."""

    cells: List[SweepCell]
    seeds: List[int]
    matched: bool
    channels: int
    wall_time: float = 0.0
    trends: Dict[str, Any] = field(default_factory=dict)
    seed_trends: Dict[str, Any] = field(default_factory=dict)

    def mse_grid(self, seed: Optional[int] = None) -> Dict[Tuple[int, int], float]:
        """Evaluation MSE per (K, D) of one seed, or its mean over the seeds that trained the cell."""
        return mean_grid(
            ((cell.codebook_size, cell.code_dim), cell.mse)
            for cell in self.cells
            if cell.mse is not None and (seed is None or cell.seed == seed)
        )

    @property
    def skipped(self) -> List[SweepCell]:
        return [cell for cell in self.cells if cell.status == SKIPPED]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "cells": [cell.to_row() for cell in self.cells],
            "seeds": self.seeds,
            "matched": self.matched,
            "channels": self.channels,
            "wall_time": self.wall_time,
            "trends": self.trends,
            "seed_trends": self.seed_trends,
        }


def summarize_trends(mse: Dict[Tuple[int, int], float]) -> Dict[str, Any]:
    """Trend of MSE over K at each fixed D, and best and worst D at each fixed K.

    Over K, every step where the MSE grows is an inversion; the trend holds with at most
    MAX_INVERSIONS inversions, none above INVERSION_TOLERANCE relative increase.
    """
    over_k: Dict[str, Any] = {}
    for code_dim in sorted({d for _, d in mse}):
        sizes = sorted(k for k, d in mse if d == code_dim)
        inversions = []
        for smaller, larger in zip(sizes, sizes[1:]):
            before, after = mse[(smaller, code_dim)], mse[(larger, code_dim)]
            if after > before:
                inversions.append({"from_k": smaller, "to_k": larger, "relative_increase": (after - before) / before})
        holds = len(inversions) <= MAX_INVERSIONS and all(
            inversion["relative_increase"] <= INVERSION_TOLERANCE for inversion in inversions
        )
        over_k[str(code_dim)] = {"codebook_sizes": sizes, "inversions": inversions, "holds": holds}

    over_d: Dict[str, Any] = {}
    for codebook_size in sorted({k for k, _ in mse}):
        dims = {d: mse[(k, d)] for k, d in mse if k == codebook_size}
        over_d[str(codebook_size)] = {
            "code_dims": sorted(dims),
            "best_d": min(dims, key=lambda d: (dims[d], d)),
            "worst_d": max(dims, key=lambda d: (dims[d], -d)),
        }

    return {"over_k": over_k, "over_d": over_d}


def cell_run_id(codebook_size: int, code_dim: int, seed: int) -> str:
    return f"K{codebook_size}-D{code_dim}-seed{seed}"


def sweep_budget(config: ExperimentConfig) -> BudgetConfig:
    """Budget the cells are derived from.

    Outside matched mode the hierarchical channel count is raised in steps of CHANNEL_STEP until it holds
    the largest swept D, as far as the patch coefficients allow; every cell shares the result. Matched mode
    keeps the configured budget.
    """
    budget = config.budget
    largest = max(config.sweep.code_dims, default=0)
    if config.sweep.matched or largest <= budget.channels:
        return budget

    n_coefficients = budget.patch_size * budget.patch_size * config.corpus.channels
    channels = budget.channels
    while channels < largest and (channels + CHANNEL_STEP) * 5 // 4 <= n_coefficients:
        channels += CHANNEL_STEP
    if channels != budget.channels:
        logger.info("sweep uses %d hierarchical channels to hold D up to %d", channels, largest)

    return replace(budget, channels=channels)


def sweep_jobs(config: ExperimentConfig, out_dir: Optional[str]) -> Tuple[List[SweepCell], List[ArmJob]]:
    """Plan the grid for every seed. Cells without an integer budget, with D above the latent channels, or
    off the reference discrete budget in matched mode, are skipped with the violated constraint as reason."""
    reference = config.budget_spec()
    base = sweep_budget(config)
    cells, jobs = [], []
    for seed in config.run_seeds:
        schedule = replace(config.schedule, seed=seed)
        for codebook_size, code_dim in config.sweep.cells():
            try:
                if config.sweep.matched and codebook_size * code_dim != reference.single.discrete:
                    raise InfeasibleBudgetError(
                        DISCRETE_BUDGET,
                        "K_s*D_s",
                        f"K_s*D_s = {codebook_size * code_dim} != 2*K_h*D_h = {reference.hier.discrete}",
                    )
                cell_config = replace(config, budget=base.with_single(codebook_size, code_dim))
                budget = cell_config.budget_spec()
            except InfeasibleBudgetError as error:
                logger.warning("skipping K=%d D=%d seed %d: %s", codebook_size, code_dim, seed, error)
                cells.append(SweepCell(codebook_size, code_dim, seed, SKIPPED, str(error)))
                continue

            cells.append(SweepCell(codebook_size, code_dim, seed, OK))
            run_id = cell_run_id(codebook_size, code_dim, seed)
            jobs.append(ArmJob(run_id, SINGLE, cell_config, budget, schedule, out_dir=out_dir))

    return cells, jobs


def run_sweep(config: ExperimentConfig) -> SweepResult:
    """Train one single-level model per (K, D) cell and seed in a worker pool and summarize the trends
    of the seed-averaged grid and of every seed."""
    config.validate()
    out_dir = str(Path(config.out_dir) / "sweep")
    cells, jobs = sweep_jobs(config, out_dir)

    start = time.perf_counter()
    results = iter(run_jobs(run_arm, jobs, config.jobs))
    for cell in cells:
        if cell.status == OK:
            cell.result = next(results)
            if not cell.result.ok:
                cell.status, cell.reason = DIVERGED, cell.result.reason

    seeds = config.run_seeds
    sweep = SweepResult(cells, seeds, config.sweep.matched, sweep_budget(config).channels)
    sweep.wall_time = time.perf_counter() - start
    sweep.trends = summarize_trends(sweep.mse_grid())
    sweep.seed_trends = {str(seed): summarize_trends(sweep.mse_grid(seed)) for seed in seeds}
    if jobs:
        write_json(Path(out_dir) / REPORT_FILE, sweep.to_dict())

    return sweep


def read_sweep_mse(out_dir: Union[str, Path], seed: Optional[int] = None) -> Dict[Tuple[int, int], float]:
    """Evaluation MSE of the persisted sweep cells, read back from the metrics CSVs and averaged over
    seeds like `SweepResult.mse_grid`."""
    values = []
    for run_dir in find_run_dirs(out_dir):
        manifest = run_dir.read_manifest()
        if seed is not None and manifest["seed"] != seed:
            continue
        single = manifest["budget"]["single"]
        values.append(((single["codebook_size"], single["code_dim"]), run_dir.read_eval()["mse"]))

    return mean_grid(values)


def run_threshold_sweep(config: ExperimentConfig) -> Dict[str, Any]:
    """Train the configured architecture once per dead code threshold and seed, both interventions on."""
    config.validate()
    out_dir = str(Path(config.out_dir) / "thresholds")
    budget = config.budget_spec()

    plan = [(threshold, seed) for seed in config.run_seeds for threshold in config.thresholds]
    jobs = [
        ArmJob(
            f"{config.architecture}-threshold{threshold}-seed{seed}",
            config.architecture,
            config,
            budget,
            replace(config.schedule, seed=seed, data_init=True, dead_reset=True),
            threshold=threshold,
            out_dir=out_dir,
        )
        for threshold, seed in plan
    ]
    results = run_jobs(run_arm, jobs, config.jobs)

    report = {
        "window_len": config.window_len,
        "thresholds": [{"threshold": threshold, **result.to_row()} for (threshold, _), result in zip(plan, results)],
    }
    write_json(Path(out_dir) / REPORT_FILE, report)

    return report


class SweepStage(Stage):
    """Run the grid sweep, or the threshold sweep when `thresholds` is set."""

    def __init__(self, thresholds: bool = False):
        self.thresholds = thresholds

    def set_config(self, config: ExperimentConfig):
        config.validate()
        self._config = config

    def run(self) -> Dict[str, Any]:
        if self.thresholds:
            return run_threshold_sweep(self._config)

        return run_sweep(self._config).to_dict()
