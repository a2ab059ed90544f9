from typing import Any, Dict

import numpy as np
import pytest

from src.stages import BudgetConfig, ExperimentConfig
from src.tasks.pipeline import BudgetSpec
from src.tools.synthetic import gen_synthetic

# 16 px images cut into 4 px patches give a 4x4 bottom grid and a 2x2 top grid
IMAGE_SIZE = 16
PATCH_SIZE = 4


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def images() -> np.ndarray:
    return gen_synthetic("mixed", 16, seed=0, size=IMAGE_SIZE)


@pytest.fixture
def budget() -> BudgetSpec:
    """K_h = 8, D_h = 4, C_h = 8 on the hierarchical side; C_s = 10 and K_s = 16 on the single side."""
    return BudgetConfig(codebook_size=8, code_dim=4, channels=8, patch_size=PATCH_SIZE).spec(IMAGE_SIZE)


@pytest.fixture
def tiny_config_dict(tmp_path) -> Dict[str, Any]:
    return {
        "corpus": {"kind": "mixed", "count": 16, "eval_count": 8, "seed": 0, "size": IMAGE_SIZE},
        "budget": {"codebook_size": 8, "code_dim": 4, "channels": 8, "patch_size": PATCH_SIZE},
        "schedule": {"steps": 4, "batch_size": 4, "log_every": 1},
        "sweep": {"codebook_sizes": [8, 16], "code_dims": [4]},
        "window_len": 2,
        "threshold": 1,
        "jobs": 1,
        "out_dir": str(tmp_path / "runs"),
    }


@pytest.fixture
def tiny_config(tiny_config_dict) -> ExperimentConfig:
    return ExperimentConfig.from_dict(tiny_config_dict)
