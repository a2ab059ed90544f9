"""This module contains the single-level and two-level hierarchical models, the capacity matching
between them, the training loop and evaluation.

The hierarchical model keeps the bottom latent at the patch grid resolution and derives the top
latent from it: average pooling by 2 followed by a learned linear map. Both levels are quantized with
codebooks of equal size and dimension, the quantized top grid is upsampled and concatenated to the
bottom grid along channels, and one linear map decodes the concatenation.
"""
import copy
import logging
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from ..errors import ConfigError, ContractViolationError, InfeasibleBudgetError, InputError, TrainingDivergenceError
from ..utils.grid_utils import outer_sum, to_rows
from . import codebook as cb
from .codebook import AssignmentResult, Codebook, UsageWindow
from .metrics import LorenzCurve, UsageStats, gini, lorenz, mse, normalized_perplexity, perplexity, psnr_from_mse
from .transform import (
    CODEC_PARAMETERS,
    DEFAULT_BETA,
    DEFAULT_LEARNING_RATE,
    AdamState,
    CodecGradients,
    LinearCodec,
    LossBreakdown,
    adam_update,
    check_latent_finite,
    decode,
    decode_coefficients,
    downsample2x,
    downsample2x_adjoint,
    encode,
    encode_coefficients,
    mean_squared,
    named_matrices,
    new_codec,
    project,
    quantize_grid,
    selection_matrix,
    straight_through_step,
    unproject,
    upsample2x,
    upsample2x_adjoint,
)

logger = logging.getLogger(__name__)

CONTINUOUS_BUDGET = "continuous latent budget"
DISCRETE_BUDGET = "discrete codebook budget"
SPATIAL_CONSTRAINT = "spatial constraint H_s*W_s == H_b*W_b"
TOP_GRID_CONSTRAINT = "top grid constraint H_b == 2*H_t, W_b == 2*W_t"
POSITIVE_DIMENSIONS = "positive dimensions"
CODE_DIM_CONSTRAINT = "code dimension constraint D <= C"

SINGLE = "single"
HIER = "hier"
ARCHITECTURES = (SINGLE, HIER)

EVAL_BATCH_SIZE = 64


@dataclass(frozen=True)
class SingleBudget:
    height: int
    width: int
    channels: int
    codebook_size: int
    code_dim: int

    @property
    def continuous(self) -> int:
        return self.height * self.width * self.channels

    @property
    def discrete(self) -> int:
        return self.codebook_size * self.code_dim


@dataclass(frozen=True)
class HierBudget:
    bottom_height: int
    bottom_width: int
    top_height: int
    top_width: int
    channels: int
    codebook_size: int
    code_dim: int

    @property
    def continuous(self) -> int:
        return (self.bottom_height * self.bottom_width + self.top_height * self.top_width) * self.channels

    @property
    def discrete(self) -> int:
        return 2 * self.codebook_size * self.code_dim


@dataclass(frozen=True)
class BudgetSpec:
    """Paired capacity description of a single-level and a hierarchical model.

    Construction fails unless both the continuous budgets (H*W*C at the quantizer input) and the
    discrete budgets (K*D summed over codebooks) are equal, and unless every code dimension fits in the
    latent channels it is projected from.
    """

    single: SingleBudget
    hier: HierBudget

    def __post_init__(self):
        single, hier = self.single, self.hier
        dims = (
            single.height, single.width, single.channels, single.codebook_size, single.code_dim,
            hier.bottom_height, hier.bottom_width, hier.top_height, hier.top_width,
            hier.channels, hier.codebook_size, hier.code_dim,
        )  # fmt: skip
        if min(dims) < 1:
            raise InfeasibleBudgetError(POSITIVE_DIMENSIONS, "budget", f"all dimensions must be >= 1, got {dims}")
        if hier.bottom_height != 2 * hier.top_height or hier.bottom_width != 2 * hier.top_width:
            raise InfeasibleBudgetError(
                TOP_GRID_CONSTRAINT,
                "top grid",
                f"bottom {hier.bottom_height}x{hier.bottom_width}, top {hier.top_height}x{hier.top_width}",
            )
        if single.height * single.width != hier.bottom_height * hier.bottom_width:
            raise InfeasibleBudgetError(
                SPATIAL_CONSTRAINT,
                "H_s*W_s",
                f"{single.height * single.width} != {hier.bottom_height * hier.bottom_width}",
            )
        if single.continuous != hier.continuous:
            raise InfeasibleBudgetError(
                CONTINUOUS_BUDGET,
                "C_s",
                f"H_s*W_s*C_s = {single.continuous} != (H_b*W_b + H_t*W_t)*C_h = {hier.continuous}",
            )
        if single.discrete != hier.discrete:
            raise InfeasibleBudgetError(
                DISCRETE_BUDGET,
                "K_s*D_s",
                f"K_s*D_s = {single.discrete} != 2*K_h*D_h = {hier.discrete}",
            )
        if single.code_dim > single.channels or hier.code_dim > hier.channels:
            raise InfeasibleBudgetError(
                CODE_DIM_CONSTRAINT,
                "D",
                f"D_s = {single.code_dim} with C_s = {single.channels}, "
                f"D_h = {hier.code_dim} with C_h = {hier.channels}",
            )

    def to_dict(self) -> dict:
        return {"single": self.single.__dict__.copy(), "hier": self.hier.__dict__.copy()}

    @classmethod
    def from_dict(cls, data: dict) -> "BudgetSpec":
        return cls(single=SingleBudget(**data["single"]), hier=HierBudget(**data["hier"]))


def match_budget(
    bottom_shape: Tuple[int, int],
    top_shape: Tuple[int, int],
    channels: int,
    codebook_size: int,
    code_dim: int,
    single_shape: Tuple[int, int],
    single_code_dim: int,
) -> BudgetSpec:
    """Derive the single-level budget matching a hierarchical one.

    `C_s = C_h (H_b W_b + H_t W_t) / (H_s W_s)` and `K_s = 2 K_h D_h / D_s`; both must be integers.
    """
    (bottom_h, bottom_w), (top_h, top_w), (single_h, single_w) = bottom_shape, top_shape, single_shape
    dims = (bottom_h, bottom_w, top_h, top_w, channels, codebook_size, code_dim, single_h, single_w, single_code_dim)
    if min(dims) < 1:
        raise InfeasibleBudgetError(POSITIVE_DIMENSIONS, "budget", f"all dimensions must be >= 1, got {dims}")
    if bottom_h != 2 * top_h or bottom_w != 2 * top_w:
        raise InfeasibleBudgetError(TOP_GRID_CONSTRAINT, "top grid", f"bottom {bottom_shape}, top {top_shape}")
    if single_h * single_w != bottom_h * bottom_w:
        raise InfeasibleBudgetError(SPATIAL_CONSTRAINT, "H_s*W_s", f"{single_shape} vs {bottom_shape}")

    continuous = channels * (bottom_h * bottom_w + top_h * top_w)
    if continuous % (single_h * single_w):
        raise InfeasibleBudgetError(
            CONTINUOUS_BUDGET, "C_s", f"{continuous} / {single_h * single_w} is not an integer"
        )
    discrete = 2 * codebook_size * code_dim
    if discrete % single_code_dim:
        raise InfeasibleBudgetError(
            DISCRETE_BUDGET, "K_s", f"2*K_h*D_h = {discrete} is not divisible by D_s = {single_code_dim}"
        )

    return BudgetSpec(
        single=SingleBudget(
            height=single_h,
            width=single_w,
            channels=continuous // (single_h * single_w),
            codebook_size=discrete // single_code_dim,
            code_dim=single_code_dim,
        ),
        hier=HierBudget(
            bottom_height=bottom_h,
            bottom_width=bottom_w,
            top_height=top_h,
            top_width=top_w,
            channels=channels,
            codebook_size=codebook_size,
            code_dim=code_dim,
        ),
    )


@dataclass
class TopStage:
    """Top level encoder of the hierarchical model, applied to the pooled bottom latent."""

    PARAMETERS = ("encoder", "projection")

    encoder: np.ndarray
    projection: np.ndarray

    def parameter_count(self) -> int:
        return self.encoder.size + self.projection.size


@dataclass
class SingleLevelModel:
    codec: LinearCodec
    codebook: Codebook
    usage: UsageWindow
    grid_shape: Tuple[int, int]

    def __post_init__(self):
        if self.codec.levels != 1 or self.codec.code_dim != self.codebook.dim:
            raise ContractViolationError(
                f"codec code_dim {self.codec.code_dim} does not match codebook dim {self.codebook.dim}"
            )

    @property
    def codebooks(self) -> List[Codebook]:
        return [self.codebook]

    @property
    def usages(self) -> List[UsageWindow]:
        return [self.usage]


@dataclass
class HierarchicalModel:
    codec: LinearCodec
    top: TopStage
    bottom_codebook: Codebook
    top_codebook: Codebook
    bottom_usage: UsageWindow
    top_usage: UsageWindow
    grid_shape: Tuple[int, int]

    def __post_init__(self):
        bottom, top = self.bottom_codebook, self.top_codebook
        if bottom.size != top.size or bottom.dim != top.dim:
            raise ContractViolationError("both hierarchical codebooks must share size and dimension")
        if self.codec.levels != 2 or self.codec.code_dim != bottom.dim:
            raise ContractViolationError("hierarchical codec must decode two levels of the codebook dimension")
        channels = self.codec.latent_channels
        if self.top.encoder.shape != (channels, channels) or self.top.projection.shape != (channels, bottom.dim):
            raise ContractViolationError("top stage shapes do not match the bottom codec")
        if self.grid_shape[0] % 2 or self.grid_shape[1] % 2:
            raise ContractViolationError(f"bottom grid {self.grid_shape} cannot be pooled by 2")

    @property
    def codebooks(self) -> List[Codebook]:
        return [self.bottom_codebook, self.top_codebook]

    @property
    def usages(self) -> List[UsageWindow]:
        return [self.bottom_usage, self.top_usage]


Model = Union[SingleLevelModel, HierarchicalModel]


def level_names(model: Model) -> List[str]:
    return ["single"] if isinstance(model, SingleLevelModel) else ["bottom", "top"]


def _with_codebooks(model: Model, codebooks: Sequence[Codebook]) -> Model:
    if isinstance(model, SingleLevelModel):
        return replace(model, codebook=codebooks[0])

    return replace(model, bottom_codebook=codebooks[0], top_codebook=codebooks[1])


def build_model(
    architecture: str,
    budget: BudgetSpec,
    patch_size: int,
    channels: int,
    seed: int = 0,
    learning_rate: float = DEFAULT_LEARNING_RATE,
    beta: float = DEFAULT_BETA,
    decay: float = cb.DEFAULT_DECAY,
    window_len: int = cb.DEFAULT_WINDOW_LEN,
    threshold: int = cb.DEFAULT_DEAD_THRESHOLD,
) -> Model:
    """Build one side of a budget pair with uniformly initialized codebooks."""
    if architecture == SINGLE:
        single = budget.single
        codec = new_codec(patch_size, channels, single.channels, single.code_dim, 1, learning_rate, beta)

        return SingleLevelModel(
            codec=codec,
            codebook=cb.init_uniform(single.codebook_size, single.code_dim, seed, decay),
            usage=UsageWindow(single.codebook_size, window_len, threshold),
            grid_shape=(single.height, single.width),
        )

    if architecture == HIER:
        hier = budget.hier
        codec = new_codec(patch_size, channels, hier.channels, hier.code_dim, 2, learning_rate, beta)
        # The top level reads the channel band after the bottom one when it fits, matching the fusion decoder
        top_offset = hier.code_dim if 2 * hier.code_dim <= hier.channels else 0

        return HierarchicalModel(
            codec=codec,
            top=TopStage(
                encoder=np.eye(hier.channels),
                projection=selection_matrix(hier.channels, hier.code_dim, top_offset),
            ),
            bottom_codebook=cb.init_uniform(hier.codebook_size, hier.code_dim, seed, decay),
            top_codebook=cb.init_uniform(hier.codebook_size, hier.code_dim, seed + 1, decay),
            bottom_usage=UsageWindow(hier.codebook_size, window_len, threshold),
            top_usage=UsageWindow(hier.codebook_size, window_len, threshold),
            grid_shape=(hier.bottom_height, hier.bottom_width),
        )

    raise InputError(f"unknown architecture {architecture!r}, expected one of {ARCHITECTURES}")


def count_parameters(model: Model) -> int:
    """Number of gradient-trained parameters; codebooks are learned by EMA and not counted."""
    if isinstance(model, SingleLevelModel):
        return model.codec.parameter_count()

    return model.codec.parameter_count() + model.top.parameter_count()


def _as_batch(images: np.ndarray) -> Tuple[np.ndarray, bool]:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim == 3:
        return images[None], True
    if images.ndim != 4:
        raise InputError(f"expected an (H, W, C) image or (B, H, W, C) batch, got shape {images.shape}")

    return images, False


def _check_grid(model: Model, coefficients: np.ndarray) -> None:
    grid_shape = tuple(coefficients.shape[-3:-1])
    if grid_shape != tuple(model.grid_shape):
        raise ContractViolationError(
            f"image gives a {grid_shape} latent grid but the model budget is {model.grid_shape}"
        )


def single_forward(model: SingleLevelModel, image: np.ndarray) -> Tuple[np.ndarray, np.ndarray, AssignmentResult]:
    """Encode, quantize and decode. Returns the reconstruction clamped to [0, 1], `z_e` and the assignment."""
    images, squeeze = _as_batch(image)
    coefficients = encode_coefficients(model.codec, images)
    _check_grid(model, coefficients)

    _, z_e = encode(model.codec, coefficients)
    z_q, assignment = quantize_grid(z_e, model.codebook)
    reconstruction = np.clip(decode_coefficients(model.codec, decode(model.codec, z_q)), 0.0, 1.0)

    if squeeze:
        return reconstruction[0], z_e[0], assignment

    return reconstruction, z_e, assignment


@dataclass
class HierLatents:
    z_o_bottom: np.ndarray
    z_e_bottom: np.ndarray
    pooled: np.ndarray
    z_o_top: np.ndarray
    z_e_top: np.ndarray


def hier_encode(model: HierarchicalModel, coefficients: np.ndarray) -> HierLatents:
    z_o_bottom, z_e_bottom = encode(model.codec, coefficients)
    pooled = downsample2x(z_o_bottom)
    z_o_top = project(pooled, model.top.encoder)

    return HierLatents(z_o_bottom, z_e_bottom, pooled, z_o_top, project(z_o_top, model.top.projection))


def fuse(z_q_bottom: np.ndarray, z_q_top: np.ndarray) -> np.ndarray:
    """Concatenate the bottom grid with the 2x upsampled top grid along channels."""
    return np.concatenate([z_q_bottom, upsample2x(z_q_top)], axis=-1)


def hier_forward(
    model: HierarchicalModel, image: np.ndarray
) -> Tuple[np.ndarray, Tuple[np.ndarray, np.ndarray], Tuple[AssignmentResult, AssignmentResult]]:
    """Returns the clamped reconstruction, `(z_e_bottom, z_e_top)` and `(bottom, top)` assignments."""
    images, squeeze = _as_batch(image)
    coefficients = encode_coefficients(model.codec, images)
    _check_grid(model, coefficients)

    latents = hier_encode(model, coefficients)
    z_q_bottom, bottom_assignment = quantize_grid(latents.z_e_bottom, model.bottom_codebook)
    z_q_top, top_assignment = quantize_grid(latents.z_e_top, model.top_codebook)

    fused = fuse(z_q_bottom, z_q_top)
    reconstruction = np.clip(decode_coefficients(model.codec, decode(model.codec, fused)), 0.0, 1.0)

    z_e = (latents.z_e_bottom, latents.z_e_top)
    if squeeze:
        reconstruction, z_e = reconstruction[0], (z_e[0][0], z_e[1][0])

    return reconstruction, z_e, (bottom_assignment, top_assignment)


@dataclass
class TopGradients:
    encoder: np.ndarray
    projection: np.ndarray


def hier_loss_and_gradients(
    model: HierarchicalModel,
    coefficients: np.ndarray,
    latents: HierLatents,
    z_q_bottom: np.ndarray,
    z_q_top: np.ndarray,
) -> Tuple[LossBreakdown, CodecGradients, TopGradients]:
    """Straight-through loss and gradients of the hierarchical model at fixed assignments.

    Reconstruction gradients pass each quantizer unchanged; each level adds its own commitment
    gradient. Commitment losses of both levels are summed.
    """
    codec, beta = model.codec, model.codec.beta
    fused = fuse(z_q_bottom, z_q_top)
    z_d = unproject(fused, codec.unprojection)
    residual = project(z_d, codec.synthesis) - coefficients

    loss = LossBreakdown(
        reconstruction=mean_squared(residual),
        commitment=beta * (mean_squared(latents.z_e_bottom - z_q_bottom) + mean_squared(latents.z_e_top - z_q_top)),
    )

    grad_reconstruction = 2.0 * residual / residual.size
    grad_synthesis = outer_sum(z_d, grad_reconstruction)
    grad_z_d = project(grad_reconstruction, codec.synthesis.T)
    grad_unprojection = outer_sum(fused, grad_z_d)
    grad_fused = project(grad_z_d, codec.unprojection.T)

    code_dim = codec.code_dim
    grad_z_q_bottom = grad_fused[..., :code_dim]
    grad_z_q_top = upsample2x_adjoint(grad_fused[..., code_dim:])

    # Top level
    grad_z_e_top = grad_z_q_top + 2.0 * beta * (latents.z_e_top - z_q_top) / z_q_top.size
    grad_top_projection = outer_sum(latents.z_o_top, grad_z_e_top)
    grad_z_o_top = project(grad_z_e_top, model.top.projection.T)
    grad_top_encoder = outer_sum(latents.pooled, grad_z_o_top)
    grad_pooled = project(grad_z_o_top, model.top.encoder.T)

    # Bottom level, receiving the top path through the pooling
    grad_z_e_bottom = grad_z_q_bottom + 2.0 * beta * (latents.z_e_bottom - z_q_bottom) / z_q_bottom.size
    grad_projection = outer_sum(latents.z_o_bottom, grad_z_e_bottom)
    grad_z_o_bottom = project(grad_z_e_bottom, codec.projection.T) + downsample2x_adjoint(grad_pooled)
    grad_analysis = outer_sum(coefficients, grad_z_o_bottom)

    return (
        loss,
        CodecGradients(grad_analysis, grad_synthesis, grad_projection, grad_unprojection),
        TopGradients(grad_top_encoder, grad_top_projection),
    )


def hier_straight_through_loss(
    model: HierarchicalModel,
    coefficients: np.ndarray,
    z_q_bottom: np.ndarray,
    z_q_top: np.ndarray,
    offset_bottom: np.ndarray,
    offset_top: np.ndarray,
) -> LossBreakdown:
    """Hierarchical counterpart of `straight_through_loss`: each level decodes `z_e + offset` with the
    offsets frozen, so its exact gradient equals the straight-through gradient."""
    latents = hier_encode(model, coefficients)
    fused = fuse(latents.z_e_bottom + offset_bottom, latents.z_e_top + offset_top)
    residual = decode(model.codec, fused) - coefficients

    return LossBreakdown(
        reconstruction=mean_squared(residual),
        commitment=model.codec.beta
        * (mean_squared(latents.z_e_bottom - z_q_bottom) + mean_squared(latents.z_e_top - z_q_top)),
    )


@dataclass
class ModelStep:
    """Outcome of one training step of either architecture, levels ordered bottom to top."""

    loss: LossBreakdown
    model: Model
    assignments: List[AssignmentResult]
    z_e: List[np.ndarray]
    optimizer: AdamState


def single_step(
    model: SingleLevelModel,
    images: np.ndarray,
    step: int = 0,
    learning_rate: Optional[float] = None,
    optimizer: Optional[AdamState] = None,
) -> ModelStep:
    result = straight_through_step(model.codec, model.codebook, images, step, learning_rate, optimizer)

    return ModelStep(
        loss=result.loss,
        model=replace(model, codec=result.codec, codebook=result.codebook),
        assignments=[result.assignment],
        z_e=[result.z_e],
        optimizer=result.optimizer,
    )


def hier_step(
    model: HierarchicalModel,
    images: np.ndarray,
    step: int = 0,
    learning_rate: Optional[float] = None,
    optimizer: Optional[AdamState] = None,
) -> ModelStep:
    """One training step of the hierarchical model: an Adam step on both encoders and the fusion
    decoder, EMA updates of both codebooks."""
    if images.ndim != 4 or images.shape[0] == 0:
        raise InputError("a training batch must be a non-empty (B, H, W, C) array")

    coefficients = encode_coefficients(model.codec, images)
    _check_grid(model, coefficients)
    latents = hier_encode(model, coefficients)
    check_latent_finite(latents.z_e_bottom, step)
    check_latent_finite(latents.z_e_top, step)

    z_q_bottom, bottom_assignment = quantize_grid(latents.z_e_bottom, model.bottom_codebook)
    z_q_top, top_assignment = quantize_grid(latents.z_e_top, model.top_codebook)
    loss, codec_gradients, top_gradients = hier_loss_and_gradients(model, coefficients, latents, z_q_bottom, z_q_top)
    if not np.isfinite(loss.total):
        raise TrainingDivergenceError(step, f"loss is {loss.total}")

    rate = model.codec.learning_rate if learning_rate is None else learning_rate
    params = {**named_matrices(model.codec), **_prefixed(named_matrices(model.top, TopStage.PARAMETERS))}
    gradients = {**named_matrices(codec_gradients), **_prefixed(named_matrices(top_gradients, TopStage.PARAMETERS))}
    params, optimizer = adam_update(params, gradients, optimizer if optimizer is not None else AdamState(), rate)

    updated = replace(
        model,
        codec=replace(model.codec, **{name: params[name] for name in CODEC_PARAMETERS}),
        top=TopStage(encoder=params["top_encoder"], projection=params["top_projection"]),
        bottom_codebook=cb.ema_update(model.bottom_codebook, to_rows(latents.z_e_bottom), bottom_assignment),
        top_codebook=cb.ema_update(model.top_codebook, to_rows(latents.z_e_top), top_assignment),
    )

    return ModelStep(
        loss=loss,
        model=updated,
        assignments=[bottom_assignment, top_assignment],
        z_e=[latents.z_e_bottom, latents.z_e_top],
        optimizer=optimizer,
    )


def _prefixed(matrices: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
    return {f"top_{name}": value for name, value in matrices.items()}


def model_step(
    model: Model,
    images: np.ndarray,
    step: int = 0,
    learning_rate: Optional[float] = None,
    optimizer: Optional[AdamState] = None,
) -> ModelStep:
    if isinstance(model, SingleLevelModel):
        return single_step(model, images, step, learning_rate, optimizer)

    return hier_step(model, images, step, learning_rate, optimizer)


def encoder_outputs(model: Model, images: np.ndarray) -> List[np.ndarray]:
    """Rows of `z_e` for every level, bottom first."""
    coefficients = encode_coefficients(model.codec, np.asarray(images, dtype=np.float64))
    _check_grid(model, coefficients)
    if isinstance(model, SingleLevelModel):
        return [to_rows(encode(model.codec, coefficients)[1])]

    latents = hier_encode(model, coefficients)

    return [to_rows(latents.z_e_bottom), to_rows(latents.z_e_top)]


# Number of corpus images whose encoder outputs seed the codebooks
INIT_SAMPLE_IMAGES = 256
# Schedule fields that only change what a run prints
REPORTING_FIELDS = ("log_every", "progress")


@dataclass
class TrainSchedule:
    """Training options.

    `data_init` selects initialization from encoder outputs instead of the uniform one;
    `adversarial_init` overrides both and puts every code at the mean encoder output.
    The learning rate is multiplied by `lr_decay` every `lr_decay_every` steps.
    """

    steps: int = 2000
    batch_size: int = 32
    seed: int = 0
    data_init: bool = True
    dead_reset: bool = True
    adversarial_init: bool = False
    lr_decay: float = 1.0
    lr_decay_every: int = 1000
    log_every: int = 100
    progress: bool = False

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError(f"steps must be >= 0 and batch_size >= 1, got {self.steps} and {self.batch_size}")
        if not 0.0 < self.lr_decay <= 1.0 or self.lr_decay_every < 1:
            raise ConfigError(f"invalid learning rate decay {self.lr_decay} every {self.lr_decay_every} steps")
        if self.log_every < 1:
            raise ConfigError(f"log_every must be >= 1, got {self.log_every}")

    def learning_rate(self, base: float, step: int) -> float:
        return base * self.lr_decay ** (step // self.lr_decay_every)

    def to_manifest(self) -> Dict[str, Any]:
        """The fields that shape the trained model; logging and progress options are left out."""
        return {key: value for key, value in asdict(self).items() if key not in REPORTING_FIELDS}


@dataclass
class StepRecord:
    """Per-step training diagnostics. Perplexity and dead codes are summed over levels, Gini is averaged."""

    step: int
    reconstruction: float
    commitment: float
    total: float
    perplexity: float
    normalized_perplexity: float
    gini: float
    dead_codes: int
    resets: int


@dataclass
class ResetEvent:
    step: int
    level: str
    codes: List[int]


@dataclass
class TrainReport:
    model: Model
    schedule: TrainSchedule
    history: List[StepRecord] = field(default_factory=list)
    resets: List[ResetEvent] = field(default_factory=list)

    @property
    def total_resets(self) -> int:
        return sum(len(event.codes) for event in self.resets)


def derived_seed(seed: int, *keys: int) -> int:
    """Deterministic sub-seed for one random event of a run."""
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def initialize_codebooks(model: Model, corpus: np.ndarray, schedule: TrainSchedule) -> Model:
    if not schedule.data_init and not schedule.adversarial_init:
        return model

    rng = np.random.default_rng(derived_seed(schedule.seed, 0))
    n_images = min(INIT_SAMPLE_IMAGES, corpus.shape[0])
    sample = corpus[np.sort(rng.choice(corpus.shape[0], size=n_images, replace=False))]
    outputs = encoder_outputs(model, sample)

    codebooks = []
    for level, (codebook, rows) in enumerate(zip(model.codebooks, outputs)):
        if schedule.adversarial_init:
            codebooks.append(cb.init_constant(rows.mean(axis=0), codebook.size, codebook.decay, codebook.smoothing_eps))
        else:
            seed = derived_seed(schedule.seed, 1, level)
            codebooks.append(cb.init_from_samples(rows, codebook.size, seed, codebook.decay, codebook.smoothing_eps))

    return _with_codebooks(model, codebooks)


def _fresh_usage(model: Model) -> Model:
    windows = [UsageWindow(window.size, window.window_len, window.threshold) for window in model.usages]
    if isinstance(model, SingleLevelModel):
        return replace(model, usage=windows[0])

    return replace(model, bottom_usage=windows[0], top_usage=windows[1])


def batch_usage(assignments: Sequence[AssignmentResult], sizes: Sequence[int]) -> Tuple[float, float, float]:
    """Perplexity summed over levels, its ratio to the total number of codes and the mean Gini."""
    stats = [UsageStats.from_indices(a.indices, size) for a, size in zip(assignments, sizes)]
    total = sum(perplexity(level) for level in stats)

    return total, total / sum(sizes), float(np.mean([gini(level) for level in stats]))


def train(model: Model, corpus: np.ndarray, schedule: TrainSchedule) -> TrainReport:
    """Train a model on `corpus` (an (M, H, W, C) array) and return the trained copy with its history.

    The input model is not modified. Batches are drawn with a generator seeded by `schedule.seed`,
    so two runs with equal inputs produce identical reports.
    """
    corpus = np.asarray(corpus, dtype=np.float64)
    if corpus.ndim != 4 or corpus.shape[0] == 0:
        raise InputError(f"training corpus must be a non-empty (M, H, W, C) array, got shape {corpus.shape}")
    _check_grid(model, encode_coefficients(model.codec, corpus[:1]))

    report = TrainReport(model=copy.deepcopy(model), schedule=schedule)
    if schedule.steps == 0:
        return report

    model = _fresh_usage(initialize_codebooks(report.model, corpus, schedule))
    names = level_names(model)
    sizes = [codebook.size for codebook in model.codebooks]
    rng = np.random.default_rng(schedule.seed)
    n_images = corpus.shape[0]
    optimizer = AdamState()

    steps = tqdm(range(schedule.steps), desc="train", disable=not schedule.progress)
    for step in steps:
        batch = corpus[rng.choice(n_images, size=schedule.batch_size, replace=schedule.batch_size > n_images)]
        rate = schedule.learning_rate(model.codec.learning_rate, step)
        result = model_step(model, batch, step, rate, optimizer)
        model, optimizer = result.model, result.optimizer

        codebooks = list(model.codebooks)
        dead_total, reset_total = 0, 0
        for level, (window, assignment, z_e) in enumerate(zip(model.usages, result.assignments, result.z_e)):
            window.push_indices(assignment.indices)
            dead = cb.detect_dead_codes(window)
            dead_total += len(dead)
            if schedule.dead_reset and dead:
                codebooks[level] = cb.reset_dead_codes(
                    codebooks[level], dead, to_rows(z_e), derived_seed(schedule.seed, 2, step, level)
                )
                window.restart(dead)
                report.resets.append(ResetEvent(step, names[level], sorted(dead)))
                reset_total += len(dead)
        model = _with_codebooks(model, codebooks)

        batch_perplexity, batch_normalized, batch_gini = batch_usage(result.assignments, sizes)
        report.history.append(
            StepRecord(
                step=step,
                reconstruction=result.loss.reconstruction,
                commitment=result.loss.commitment,
                total=result.loss.total,
                perplexity=batch_perplexity,
                normalized_perplexity=batch_normalized,
                gini=batch_gini,
                dead_codes=dead_total,
                resets=reset_total,
            )
        )
        if step % schedule.log_every == 0 or step == schedule.steps - 1:
            logger.info(
                "step %d loss %.6f perplexity %.2f dead %d", step, result.loss.total, batch_perplexity, dead_total
            )

    report.model = model

    return report


@dataclass
class LevelUsage:
    """Codebook utilization of one level over an evaluation set."""

    name: str
    stats: UsageStats
    perplexity: float
    normalized_perplexity: float
    gini: float
    lorenz: LorenzCurve

    @classmethod
    def from_stats(cls, name: str, stats: UsageStats) -> "LevelUsage":
        return cls(name, stats, perplexity(stats), normalized_perplexity(stats), gini(stats), lorenz(stats))


@dataclass
class EvalReport:
    """Reconstruction quality and codebook utilization of a model on an evaluation set.

    Usage summaries combine levels: `perplexity` is summed over levels, `normalized_perplexity`
    divides it by the total number of codes and `gini` is the mean over levels.
    """

    per_image_mse: np.ndarray
    levels: List[LevelUsage]

    @property
    def mse(self) -> float:
        return float(np.mean(self.per_image_mse))

    @property
    def mse_std(self) -> float:
        return float(np.std(self.per_image_mse))

    @property
    def per_image_psnr(self) -> np.ndarray:
        return np.array([psnr_from_mse(float(error)) for error in self.per_image_mse])

    @property
    def psnr(self) -> float:
        return float(np.mean(self.per_image_psnr))

    @property
    def psnr_std(self) -> float:
        values = self.per_image_psnr
        if not np.isfinite(values).all():
            return 0.0

        return float(np.std(values))

    @property
    def perplexity(self) -> float:
        return sum(level.perplexity for level in self.levels)

    @property
    def normalized_perplexity(self) -> float:
        return self.perplexity / sum(level.stats.size for level in self.levels)

    @property
    def gini(self) -> float:
        return float(np.mean([level.gini for level in self.levels]))


def reconstruct(model: Model, images: np.ndarray) -> Tuple[np.ndarray, List[AssignmentResult]]:
    """Clamped reconstruction and per-level assignments of an image or batch."""
    if isinstance(model, SingleLevelModel):
        reconstruction, _, assignment = single_forward(model, images)
        return reconstruction, [assignment]

    reconstruction, _, assignments = hier_forward(model, images)

    return reconstruction, list(assignments)


def evaluate(model: Model, images: np.ndarray, batch_size: int = EVAL_BATCH_SIZE) -> EvalReport:
    images = np.asarray(images, dtype=np.float64)
    if images.ndim != 4 or images.shape[0] == 0:
        raise InputError(f"evaluation set must be a non-empty (M, H, W, C) array, got shape {images.shape}")

    sizes = [codebook.size for codebook in model.codebooks]
    counts = [np.zeros(size, dtype=np.int64) for size in sizes]
    errors = []
    for start in range(0, images.shape[0], batch_size):
        batch = images[start : start + batch_size]
        reconstruction, assignments = reconstruct(model, batch)
        errors.extend(mse(image, output) for image, output in zip(batch, reconstruction))
        for level, assignment in enumerate(assignments):
            counts[level] += assignment.counts(sizes[level])

    levels = [LevelUsage.from_stats(name, UsageStats(c)) for name, c in zip(level_names(model), counts)]

    return EvalReport(per_image_mse=np.array(errors), levels=levels)
