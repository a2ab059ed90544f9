"""This module contains the collapse intervention ablation: {init from data, dead code reset} x
{single, hierarchical}, and the dimension reduction arm."""
import logging
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from ..tasks.pipeline import ARCHITECTURES
from ..tools.worker_pool import run_jobs
from . import ExperimentConfig, Stage
from .run_dir import REPORT_FILE, write_json
from .runner import ArmJob, ArmResult, run_arm

logger = logging.getLogger(__name__)

INTERVENTIONS: List[Tuple[bool, bool]] = [(data_init, reset) for data_init in (True, False) for reset in (True, False)]
# The reduced arm divides the code dimension by this factor and multiplies the codebook size by it
DIMENSION_REDUCTION_FACTOR = 4


def arm_name(architecture: str, data_init: bool, dead_reset: bool, collapse_init: str) -> str:
    init = "data" if data_init else collapse_init
    reset = "on" if dead_reset else "off"

    return f"{architecture}-init_{init}-reset_{reset}"


def ablation_jobs(config: ExperimentConfig, out_dir: Optional[str]) -> List[ArmJob]:
    budget = config.budget_spec()
    jobs = []
    for seed in config.run_seeds:
        for architecture in ARCHITECTURES:
            for data_init, dead_reset in INTERVENTIONS:
                schedule = replace(
                    config.schedule,
                    seed=seed,
                    data_init=data_init,
                    dead_reset=dead_reset,
                    adversarial_init=not data_init and config.collapse_init == "adversarial",
                )
                name = arm_name(architecture, data_init, dead_reset, config.collapse_init)
                jobs.append(ArmJob(f"{name}-seed{seed}", architecture, config, budget, schedule, out_dir=out_dir))

    return jobs


def _mean(results: List[ArmResult], key: str) -> Optional[float]:
    values = [getattr(result, key) for result in results if result.ok]

    return float(np.mean(values)) if values else None


def summarize_ablation(config: ExperimentConfig, results: List[ArmResult]) -> Dict[str, Any]:
    """Mean MSE and normalized perplexity per arm, the arm with the highest normalized perplexity
    per architecture, and per seed whether resets lowered the MSE."""
    by_arm: Dict[str, List[ArmResult]] = {}
    for result in results:
        by_arm.setdefault(result.run_id.rsplit("-seed", 1)[0], []).append(result)

    arms = {
        name: {
            "mse": _mean(group, "mse"),
            "normalized_perplexity": _mean(group, "normalized_perplexity"),
            "diverged": sum(not result.ok for result in group),
        }
        for name, group in by_arm.items()
    }

    summary: Dict[str, Any] = {"arms": arms, "best_normalized_perplexity": {}, "reset_lowers_mse": {}}
    for architecture in ARCHITECTURES:
        candidates = {
            name: arm["normalized_perplexity"]
            for name, arm in arms.items()
            if name.startswith(f"{architecture}-") and arm["normalized_perplexity"] is not None
        }
        if candidates:
            summary["best_normalized_perplexity"][architecture] = max(candidates, key=candidates.get)

        for data_init in (True, False):
            on = {r.seed: r for r in by_arm.get(arm_name(architecture, data_init, True, config.collapse_init), [])}
            off = {r.seed: r for r in by_arm.get(arm_name(architecture, data_init, False, config.collapse_init), [])}
            paired = [seed for seed in sorted(on) if seed in off and on[seed].ok and off[seed].ok]
            wins = [on[seed].mse < off[seed].mse for seed in paired]
            key = arm_name(architecture, data_init, True, config.collapse_init).replace("-reset_on", "")
            summary["reset_lowers_mse"][key] = {"wins": sum(wins), "seeds": len(wins)}

    return summary


def run_ablation(config: ExperimentConfig) -> Dict[str, Any]:
    """Train the eight intervention arms at the configured matched budget for every seed."""
    config.validate()
    out_dir = str(Path(config.out_dir) / "ablation")
    jobs = ablation_jobs(config, out_dir)
    logger.info("ablation: %d arms over seeds %s", len(jobs), config.run_seeds)
    results = run_jobs(run_arm, jobs, config.jobs)

    report = {"results": [result.to_row() for result in results], "summary": summarize_ablation(config, results)}
    write_json(Path(out_dir) / REPORT_FILE, report)

    return report


def reduced_config(config: ExperimentConfig, factor: int = DIMENSION_REDUCTION_FACTOR) -> ExperimentConfig:
    """Same budget with the code dimension divided by `factor` and the codebooks `factor` times larger."""
    budget = config.budget
    reduced = replace(
        budget,
        code_dim=max(1, budget.code_dim // factor),
        codebook_size=budget.codebook_size * factor,
        single_code_dim=max(1, budget.d_single // factor),
    )

    return replace(config, budget=reduced)


def run_dimension_reduction(config: ExperimentConfig, factor: int = DIMENSION_REDUCTION_FACTOR) -> Dict[str, Any]:
    """Compare both architectures at the configured and at the reduced code dimension, interventions on."""
    config.validate()
    out_dir = str(Path(config.out_dir) / "dimension_reduction")
    variants = {"base": config, "reduced": reduced_config(config, factor)}
    schedules = {
        seed: replace(config.schedule, seed=seed, data_init=True, dead_reset=True) for seed in config.run_seeds
    }

    jobs = []
    for variant, variant_config in variants.items():
        budget = variant_config.budget_spec()
        for seed, schedule in schedules.items():
            for architecture in ARCHITECTURES:
                run_id = f"{architecture}-{variant}-D{budget.single.code_dim}-seed{seed}"
                jobs.append(ArmJob(run_id, architecture, variant_config, budget, schedule, out_dir=out_dir))

    results = run_jobs(run_arm, jobs, config.jobs)
    report = {
        "results": [result.to_row() for result in results],
        "code_dims": {variant: c.budget_spec().single.code_dim for variant, c in variants.items()},
    }
    write_json(Path(out_dir) / REPORT_FILE, report)

    return report


class AblationStage(Stage):
    """Run the intervention ablation, then the dimension reduction arm when `with_reduction` is set."""

    def __init__(self, with_reduction: bool = False):
        self.with_reduction = with_reduction

    def set_config(self, config: ExperimentConfig):
        config.validate()
        self._config = config

    def run(self) -> Dict[str, Any]:
        report = {"ablation": run_ablation(self._config)}
        if self.with_reduction:
            report["dimension_reduction"] = run_dimension_reduction(self._config)

        return report
