"""This module contains the train stage and the helpers that use a saved checkpoint:
evaluation on the configured corpus and reconstruction of one image."""
from pathlib import Path
from typing import Any, Dict, Union

from ..errors import ContractViolationError
from ..tasks.metrics import format_psnr, mse, psnr
from ..tasks.pipeline import evaluate, reconstruct
from ..tools.blobs import load_model
from ..tools.pnm import read_image, write_image
from . import ExperimentConfig, Stage
from .runner import ArmJob, run_arm


class TrainStage(Stage):
    """Train the configured architecture once and write its run directory under `<out>/train`."""

    def set_config(self, config: ExperimentConfig):
        config.validate()
        self._config = config

    def run(self) -> Dict[str, Any]:
        config = self._config
        schedule = config.schedule
        job = ArmJob(
            run_id=f"{config.architecture}-seed{schedule.seed}",
            architecture=config.architecture,
            config=config,
            budget=config.budget_spec(),
            schedule=schedule,
            out_dir=str(self.out_dir / "train"),
            raise_on_divergence=True,
        )

        return run_arm(job).to_row()


def evaluate_checkpoint(config: ExperimentConfig, checkpoint: Union[str, Path]) -> Dict[str, Any]:
    model, manifest = load_model(checkpoint)
    _, eval_images = config.corpus.load()
    evaluation = evaluate(model, eval_images)

    return {
        "checkpoint": str(checkpoint),
        "architecture": manifest["architecture"],
        "mse": evaluation.mse,
        "mse_std": evaluation.mse_std,
        "psnr": format_psnr(evaluation.psnr),
        "perplexity": evaluation.perplexity,
        "normalized_perplexity": evaluation.normalized_perplexity,
        "gini": evaluation.gini,
        "levels": {
            level.name: {"perplexity": level.perplexity, "normalized_perplexity": level.normalized_perplexity}
            for level in evaluation.levels
        },
    }


def reconstruct_image(
    checkpoint: Union[str, Path], in_path: Union[str, Path], out_path: Union[str, Path]
) -> Dict[str, Any]:
    """Reconstruct one portable pixmap with a checkpoint, write the result and report its error."""
    model, _ = load_model(checkpoint)
    image = read_image(in_path)
    if image.shape[-1] != model.codec.channels:
        raise ContractViolationError(
            f"image has {image.shape[-1]} channels but the checkpoint codes {model.codec.channels}"
        )

    reconstruction, _ = reconstruct(model, image)
    write_image(reconstruction, out_path)

    return {
        "input": str(in_path),
        "output": str(out_path),
        "mse": mse(image, reconstruction),
        "psnr": format_psnr(psnr(image, reconstruction)),
    }
