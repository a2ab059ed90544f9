"""This module contains the experiment configuration and the base class of the experiment stages."""
import logging
from abc import ABC, abstractmethod
from dataclasses import asdict, dataclass, field, fields, replace
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Type, TypeVar, Union

import numpy as np
import yaml

from ..errors import ConfigError, InfeasibleBudgetError
from ..tasks import codebook as cb
from ..tasks.pipeline import (
    ARCHITECTURES,
    DISCRETE_BUDGET,
    SINGLE,
    TOP_GRID_CONSTRAINT,
    BudgetSpec,
    TrainSchedule,
    match_budget,
)
from ..tasks.transform import DEFAULT_BETA, DEFAULT_LEARNING_RATE, DEFAULT_PATCH_SIZE
from ..tools.pnm import read_corpus
from ..tools.synthetic import DEFAULT_IMAGE_SIZE, gen_synthetic, parse_kind

logger = logging.getLogger(__name__)

DEFAULT_OUT_DIR = "runs"
DEFAULT_THRESHOLDS = (1, 2, 3, 4, 5)
# Config fields that decide where and how fast a run goes, never what it computes
RUNTIME_FIELDS = ("out_dir", "jobs")
# Held-out images are generated from the corpus seed plus this offset
EVAL_SEED_OFFSET = 1_000_003

ConfigT = TypeVar("ConfigT")


def _from_dict(cls: Type[ConfigT], data: Optional[Dict[str, Any]], section: str) -> ConfigT:
    """Build a flat dataclass from a mapping, rejecting unknown keys."""
    data = {} if data is None else data
    if not isinstance(data, dict):
        raise ConfigError(f"config section {section!r} must be a mapping, got {type(data).__name__}")

    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in config section {section!r}: {unknown}")

    try:
        return cls(**data)
    except TypeError as error:
        raise ConfigError(f"invalid config section {section!r}: {error}") from None


@dataclass(frozen=True)
class CorpusSpec:
    """Training and evaluation images: a synthetic kind, or a directory of portable pixmaps."""

    kind: str = "mixed"
    count: int = 512
    eval_count: int = 128
    seed: int = 0
    size: int = DEFAULT_IMAGE_SIZE
    channels: int = 1
    path: Optional[str] = None

    def __post_init__(self):
        if self.path is None:
            parse_kind(self.kind)
        if self.count < 1 or self.eval_count < 1:
            raise ConfigError(f"corpus counts must be >= 1, got {self.count} and {self.eval_count}")

    def load(self) -> Tuple[np.ndarray, np.ndarray]:
        return _load_corpus(self)


@lru_cache(maxsize=4)
def _load_corpus(spec: CorpusSpec) -> Tuple[np.ndarray, np.ndarray]:
    if spec.path is not None:
        images = read_corpus(spec.path)
        logger.info("loaded %d images from %s, evaluating on the training images", len(images), spec.path)
        return images, images

    train_images = gen_synthetic(spec.kind, spec.count, spec.seed, spec.size, spec.channels)
    eval_images = gen_synthetic(spec.kind, spec.eval_count, spec.seed + EVAL_SEED_OFFSET, spec.size, spec.channels)

    return train_images, eval_images


@dataclass
class BudgetConfig:
    """Capacity of an experiment, given from the hierarchical side.

    The matched single-level model keeps the bottom grid, takes `single_code_dim` as its code
    dimension and derives its channels and codebook size from the budgets.
    """

    codebook_size: int = 64
    code_dim: int = 8
    channels: int = 16
    single_code_dim: Optional[int] = None
    patch_size: int = DEFAULT_PATCH_SIZE

    @property
    def d_single(self) -> int:
        return self.code_dim if self.single_code_dim is None else self.single_code_dim

    def spec(self, image_size: int) -> BudgetSpec:
        if image_size % self.patch_size:
            raise ConfigError(f"image size {image_size} is not divisible by patch size {self.patch_size}")
        grid = image_size // self.patch_size
        if grid % 2:
            raise InfeasibleBudgetError(TOP_GRID_CONSTRAINT, "top grid", f"bottom grid {grid}x{grid} is odd")

        bottom, top = (grid, grid), (grid // 2, grid // 2)

        return match_budget(bottom, top, self.channels, self.codebook_size, self.code_dim, bottom, self.d_single)

    def with_single(self, codebook_size: int, code_dim: int) -> "BudgetConfig":
        """Budget whose single-level side has `codebook_size` codes of `code_dim` dimensions.

        The hierarchical side keeps the code dimension equal to `code_dim` and gets half the codes.
        """
        if codebook_size % 2:
            raise InfeasibleBudgetError(
                DISCRETE_BUDGET, "K_h", f"K_s = {codebook_size} cannot be split over two equal codebooks"
            )

        return replace(self, codebook_size=codebook_size // 2, code_dim=code_dim, single_code_dim=code_dim)


@dataclass
class SweepGrid:
    """Single-level (K, D) grid; in matched mode cells must keep K * D equal to the reference budget."""

    codebook_sizes: List[int] = field(default_factory=lambda: [64, 128, 256, 512])
    code_dims: List[int] = field(default_factory=lambda: [8])
    matched: bool = False

    def cells(self) -> List[Tuple[int, int]]:
        return [(k, d) for d in self.code_dims for k in self.codebook_sizes]


@dataclass
class ExperimentConfig:
    """Everything a run needs. Round-trips through `to_dict` and `from_dict`."""

    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    budget: BudgetConfig = field(default_factory=BudgetConfig)
    schedule: TrainSchedule = field(default_factory=TrainSchedule)
    sweep: SweepGrid = field(default_factory=SweepGrid)
    architecture: str = SINGLE
    learning_rate: float = DEFAULT_LEARNING_RATE
    beta: float = DEFAULT_BETA
    decay: float = cb.DEFAULT_DECAY
    window_len: int = cb.DEFAULT_WINDOW_LEN
    threshold: int = cb.DEFAULT_DEAD_THRESHOLD
    thresholds: List[int] = field(default_factory=lambda: list(DEFAULT_THRESHOLDS))
    seeds: Optional[List[int]] = None
    collapse_init: str = "uniform"
    out_dir: str = DEFAULT_OUT_DIR
    jobs: Optional[int] = None

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}, expected one of {ARCHITECTURES}")
        if self.collapse_init not in ("uniform", "adversarial"):
            raise ConfigError(f"collapse_init must be 'uniform' or 'adversarial', got {self.collapse_init!r}")
        if self.window_len < 1 or self.threshold < 0:
            raise ConfigError(f"invalid dead code window {self.window_len} / threshold {self.threshold}")
        if self.jobs is not None and self.jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {self.jobs}")

    @property
    def run_seeds(self) -> List[int]:
        return [self.schedule.seed] if not self.seeds else list(self.seeds)

    def budget_spec(self) -> BudgetSpec:
        return self.budget.spec(self.corpus.size)

    def validate(self) -> None:
        """Check the budget before any run starts."""
        self.budget_spec()

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_manifest(self) -> Dict[str, Any]:
        """`to_dict` without the settings that cannot change a result, so equal runs persist equal bytes."""
        data = {key: value for key, value in self.to_dict().items() if key not in RUNTIME_FIELDS}
        data["schedule"] = self.schedule.to_manifest()

        return data

    @classmethod
    def from_dict(cls, data: Optional[Dict[str, Any]]) -> "ExperimentConfig":
        if data is not None and not isinstance(data, dict):
            raise ConfigError(f"experiment config must be a mapping, got {type(data).__name__}")
        data = dict(data or {})
        sections = {
            "corpus": CorpusSpec,
            "budget": BudgetConfig,
            "schedule": TrainSchedule,
            "sweep": SweepGrid,
        }
        nested = {name: _from_dict(section, data.pop(name, None), name) for name, section in sections.items()}

        return _from_dict(cls, {**data, **nested}, "experiment")


def read_config_dict(path: Union[str, Path]) -> Dict[str, Any]:
    """Raw mapping of a YAML or JSON config file; an empty file gives an empty mapping."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as error:
        raise ConfigError(f"cannot read config {path}: {error}") from None

    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as error:
        raise ConfigError(f"config {path} is not valid YAML or JSON: {error}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must hold a mapping, got {type(data).__name__}")

    return data


def load_config(path: Union[str, Path]) -> ExperimentConfig:
    return ExperimentConfig.from_dict(read_config_dict(path))


class Stage(ABC):
    """Base class of the experiment stages: configure once with `set_config`, then `run`."""

    _config: ExperimentConfig

    @abstractmethod
    def set_config(self, config: ExperimentConfig):
        ...

    @abstractmethod
    def run(self) -> Dict[str, Any]:
        ...

    @property
    def out_dir(self) -> Path:
        return Path(self._config.out_dir)
