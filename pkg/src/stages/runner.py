"""This module contains the unit of work shared by every experiment: train one model, evaluate it
and persist its run directory."""
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Optional

from ..errors import TrainingDivergenceError
from ..tasks.metrics import format_psnr
from ..tasks.pipeline import BudgetSpec, TrainSchedule, build_model, count_parameters, evaluate, train
from . import ExperimentConfig
from .run_dir import RunDirectory, finite_or_none

logger = logging.getLogger(__name__)

OK = "ok"
DIVERGED = "diverged"
SKIPPED = "skipped"


@dataclass
class ArmJob:
    """One training run of one architecture. Jobs are pickled to worker processes."""

    run_id: str
    architecture: str
    config: ExperimentConfig
    budget: BudgetSpec
    schedule: TrainSchedule
    threshold: Optional[int] = None
    out_dir: Optional[str] = None
    raise_on_divergence: bool = False


@dataclass
class ArmResult:
    run_id: str
    architecture: str
    seed: int
    status: str = OK
    reason: str = ""
    mse: float = math.nan
    mse_std: float = math.nan
    psnr: float = math.nan
    psnr_std: float = math.nan
    perplexity: float = math.nan
    normalized_perplexity: float = math.nan
    gini: float = math.nan
    dead_code_count: int = 0
    total_resets: int = 0
    parameters: int = 0
    steps: int = 0
    diverged_step: Optional[int] = None
    checkpoint: Optional[str] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.status == OK

    def to_row(self) -> Dict[str, Any]:
        row = {key: finite_or_none(value) for key, value in asdict(self).items()}
        if self.ok:
            row["psnr"] = format_psnr(self.psnr)

        return row


def run_manifest(job: ArmJob) -> Dict[str, Any]:
    return {
        "run_id": job.run_id,
        "architecture": job.architecture,
        "seed": job.schedule.seed,
        "schedule": job.schedule.to_manifest(),
        "threshold": job.config.threshold if job.threshold is None else job.threshold,
        "config": job.config.to_manifest(),
        "budget": job.budget.to_dict(),
    }


def run_arm(job: ArmJob) -> ArmResult:
    """Train, evaluate and persist one arm. Divergence is recorded in the result unless
    `raise_on_divergence` is set."""
    config = job.config
    train_images, eval_images = config.corpus.load()
    threshold = config.threshold if job.threshold is None else job.threshold

    model = build_model(
        job.architecture,
        job.budget,
        config.budget.patch_size,
        train_images.shape[-1],
        seed=job.schedule.seed,
        learning_rate=config.learning_rate,
        beta=config.beta,
        decay=config.decay,
        window_len=config.window_len,
        threshold=threshold,
    )
    result = ArmResult(job.run_id, job.architecture, job.schedule.seed, parameters=count_parameters(model))

    logger.info("training %s", job.run_id)
    try:
        report = train(model, train_images, job.schedule)
    except TrainingDivergenceError as error:
        if job.raise_on_divergence:
            raise
        logger.warning("%s: %s", job.run_id, error)
        result.status, result.reason, result.diverged_step = DIVERGED, str(error), error.step
        return result

    evaluation = evaluate(report.model, eval_images)
    result.mse, result.mse_std = evaluation.mse, evaluation.mse_std
    result.psnr, result.psnr_std = evaluation.psnr, evaluation.psnr_std
    result.perplexity, result.normalized_perplexity = evaluation.perplexity, evaluation.normalized_perplexity
    result.gini = evaluation.gini
    result.dead_code_count = report.history[-1].dead_codes if report.history else 0
    result.total_resets = report.total_resets
    result.steps = len(report.history)

    if job.out_dir is not None:
        run_dir = RunDirectory(Path(job.out_dir) / job.run_id)
        run_dir.write(run_manifest(job), report.history, evaluation, report.model, job.budget)
        result.checkpoint = str(run_dir.checkpoint)

    return result
