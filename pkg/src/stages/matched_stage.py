"""This module contains the matched budget comparison: both architectures trained with the same
schedule and seed, compared on the held-out images."""
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List

from ..tasks.pipeline import HIER, SINGLE
from ..tools.worker_pool import run_jobs
from . import ExperimentConfig, Stage
from .run_dir import REPORT_FILE, write_json
from .runner import ArmJob, ArmResult, run_arm

# Relative MSE gap between the architectures accepted as parity
MATCHED_GAP_TOLERANCE = 0.05


def relative_gap(single: ArmResult, hier: ArmResult) -> float:
    return abs(single.mse - hier.mse) / hier.mse


def compare_pair(seed: int, single: ArmResult, hier: ArmResult) -> Dict[str, Any]:
    pair: Dict[str, Any] = {"seed": seed, "single": single.to_row(), "hier": hier.to_row()}
    if single.ok and hier.ok and hier.mse > 0:
        gap = relative_gap(single, hier)
        pair["relative_gap"] = gap
        pair["within_tolerance"] = gap <= MATCHED_GAP_TOLERANCE
    else:
        pair["relative_gap"] = None
        pair["within_tolerance"] = False

    return pair


def run_matched(config: ExperimentConfig) -> Dict[str, Any]:
    """Train a single-level and a hierarchical model on the configured budget for every seed."""
    config.validate()
    budget = config.budget_spec()
    out_dir = str(Path(config.out_dir) / "matched")

    jobs: List[ArmJob] = []
    for seed in config.run_seeds:
        schedule = replace(config.schedule, seed=seed)
        for architecture in (SINGLE, HIER):
            jobs.append(ArmJob(f"{architecture}-seed{seed}", architecture, config, budget, schedule, out_dir=out_dir))

    results = run_jobs(run_arm, jobs, config.jobs)
    pairs = [compare_pair(seed, results[2 * i], results[2 * i + 1]) for i, seed in enumerate(config.run_seeds)]
    within = sum(pair["within_tolerance"] for pair in pairs)

    report = {
        "budget": budget.to_dict(),
        "pairs": pairs,
        "seeds_within_tolerance": within,
        "parity": within * 2 > len(pairs),
        "tolerance": MATCHED_GAP_TOLERANCE,
    }
    write_json(Path(out_dir) / REPORT_FILE, report)

    return report


class MatchedStage(Stage):
    def set_config(self, config: ExperimentConfig):
        config.validate()
        self._config = config

    def run(self) -> Dict[str, Any]:
        return run_matched(self._config)
