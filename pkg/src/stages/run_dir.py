"""This module contains the persistence of one run: manifest, metrics CSV, Lorenz curves and checkpoint.

A run directory holds

    manifest.json        config, seed, schedule and budget of the run
    metrics.csv          one row per training step and a final row with step "eval"
    lorenz_<level>.csv   Lorenz curve of the evaluation code usage of each level
    model.vqfk           checkpoint of the trained model
"""
import csv
import json
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

from ..errors import InputError
from ..tasks.metrics import EXACT_PSNR_MARKER, PSNR_EXACT, format_psnr, psnr_from_mse
from ..tasks.pipeline import BudgetSpec, EvalReport, Model, StepRecord
from ..tools.blobs import save_model

MANIFEST_FILE = "manifest.json"
METRICS_FILE = "metrics.csv"
CHECKPOINT_FILE = "model.vqfk"
REPORT_FILE = "report.json"
METRICS_HEADER = (
    "run_id",
    "step",
    "mse",
    "psnr",
    "perplexity",
    "normalized_perplexity",
    "gini",
    "dead_code_count",
)
LORENZ_HEADER = ("code_fraction", "assignment_share")
EVAL_STEP = "eval"


def dump_json(data: Any) -> str:
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def write_json(path: Union[str, Path], data: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_json(data), encoding="utf-8")


def write_csv(path: Union[str, Path], header: Sequence[str], rows: List[Dict[str, Any]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.DictWriter(f, fieldnames=list(header), lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)


def history_rows(run_id: str, history: Sequence[StepRecord]) -> List[Dict[str, Any]]:
    """Training rows; mse is the batch reconstruction error before clamping."""
    return [
        {
            "run_id": run_id,
            "step": record.step,
            "mse": record.reconstruction,
            "psnr": format_psnr(psnr_from_mse(record.reconstruction)),
            "perplexity": record.perplexity,
            "normalized_perplexity": record.normalized_perplexity,
            "gini": record.gini,
            "dead_code_count": record.dead_codes,
        }
        for record in history
    ]


def eval_row(run_id: str, evaluation: EvalReport, dead_codes: int) -> Dict[str, Any]:
    return {
        "run_id": run_id,
        "step": EVAL_STEP,
        "mse": evaluation.mse,
        "psnr": format_psnr(evaluation.psnr),
        "perplexity": evaluation.perplexity,
        "normalized_perplexity": evaluation.normalized_perplexity,
        "gini": evaluation.gini,
        "dead_code_count": dead_codes,
    }


class RunDirectory:
    """Directory holding every artifact of one training run."""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)

    @property
    def checkpoint(self) -> Path:
        return self.path / CHECKPOINT_FILE

    def write(
        self,
        manifest: Dict[str, Any],
        history: Sequence[StepRecord],
        evaluation: EvalReport,
        model: Model,
        budget: BudgetSpec,
    ) -> None:
        self.path.mkdir(parents=True, exist_ok=True)
        run_id = manifest["run_id"]

        write_json(self.path / MANIFEST_FILE, manifest)

        dead_codes = history[-1].dead_codes if history else 0
        rows = history_rows(run_id, history) + [eval_row(run_id, evaluation, dead_codes)]
        write_csv(self.path / METRICS_FILE, METRICS_HEADER, rows)

        for level in evaluation.levels:
            points = [dict(zip(LORENZ_HEADER, point)) for point in level.lorenz.points()]
            write_csv(self.path / f"lorenz_{level.name}.csv", LORENZ_HEADER, points)

        save_model(model, budget, manifest, self.checkpoint)

    def read_manifest(self) -> Dict[str, Any]:
        try:
            return json.loads((self.path / MANIFEST_FILE).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as error:
            raise InputError(f"cannot read run manifest in {self.path}: {error}") from None

    def read_metrics(self) -> List[Dict[str, str]]:
        try:
            with open(self.path / METRICS_FILE, newline="", encoding="utf-8") as f:
                reader = csv.DictReader(f)
                if tuple(reader.fieldnames or ()) != METRICS_HEADER:
                    raise InputError(f"unexpected metrics header in {self.path}: {reader.fieldnames}")
                return list(reader)
        except OSError as error:
            raise InputError(f"cannot read metrics in {self.path}: {error}") from None

    def read_eval(self) -> Dict[str, Any]:
        """The evaluation row with numbers parsed back to the values that were written."""
        rows = [row for row in self.read_metrics() if row["step"] == EVAL_STEP]
        if not rows:
            raise InputError(f"metrics in {self.path} have no evaluation row")

        return parse_row(rows[-1])


def parse_row(row: Dict[str, str]) -> Dict[str, Any]:
    parsed: Dict[str, Any] = {"run_id": row["run_id"], "step": row["step"]}
    for key in ("mse", "perplexity", "normalized_perplexity", "gini"):
        parsed[key] = float(row[key])
    parsed["psnr"] = PSNR_EXACT if row["psnr"] == EXACT_PSNR_MARKER else float(row["psnr"])
    parsed["dead_code_count"] = int(row["dead_code_count"])

    return parsed


def find_run_dirs(root: Union[str, Path]) -> List[RunDirectory]:
    root = Path(root)
    if not root.is_dir():
        raise InputError(f"{root} is not a directory")

    return [RunDirectory(manifest.parent) for manifest in sorted(root.rglob(MANIFEST_FILE))]


def summarize_run_dirs(root: Union[str, Path]) -> List[Dict[str, Any]]:
    """One summary per run directory found under `root`, built from the persisted files only."""
    summaries = []
    for run_dir in find_run_dirs(root):
        manifest = run_dir.read_manifest()
        evaluation = run_dir.read_eval()
        steps = sum(1 for row in run_dir.read_metrics() if row["step"] != EVAL_STEP)
        summaries.append(
            {
                **evaluation,
                "psnr": format_psnr(evaluation["psnr"]),
                "architecture": manifest.get("architecture"),
                "seed": manifest.get("seed"),
                "steps": steps,
                "path": str(run_dir.path),
            }
        )

    return summaries


def finite_or_none(value: Optional[float]) -> Optional[float]:
    """JSON has no NaN; missing metrics are written as null."""
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None

    return value
