"""This module contains the analytic patch codec: patchify / unpatchify, the orthonormal block DCT,
the learned linear projections, 2x grid resampling and the straight-through training step.

Shapes:
    images: `(H, W, C)` or batched `(B, H, W, C)`, pixel values in [0, 1].
    latent grids: `(grid_h, grid_w, dim)` or batched `(B, grid_h, grid_w, dim)`.
"""
import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Dict, Optional, Sequence, Tuple

import cv2
import numpy as np

from ..errors import ContractViolationError, InputError, TrainingDivergenceError
from ..utils.array_utils import check_dim, to_f32
from ..utils.grid_utils import from_rows, outer_sum, to_rows
from .codebook import AssignmentResult, Codebook, ema_update, nearest_assign

logger = logging.getLogger(__name__)

DEFAULT_PATCH_SIZE = 8
DEFAULT_LEARNING_RATE = 3e-4
DEFAULT_BETA = 0.25

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CODEC_PARAMETERS = ("analysis", "synthesis", "projection", "unprojection")

FORWARD = "forward"
INVERSE = "inverse"


@dataclass
class LinearCodec:
    """Patch codec with learned linear maps around a fixed block DCT.

    Encoding is `coefficients @ analysis @ projection`, decoding is `codes @ unprojection @ synthesis`.
    `unprojection` has `levels * code_dim` rows: one block per quantized level feeding the decoder.
    """

    patch_size: int
    channels: int
    analysis: np.ndarray
    synthesis: np.ndarray
    projection: np.ndarray
    unprojection: np.ndarray
    learning_rate: float = DEFAULT_LEARNING_RATE
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        n_coefficients = self.patch_size * self.patch_size * self.channels
        latent_channels = self.analysis.shape[1]
        code_dim = self.projection.shape[1]

        if self.analysis.shape[0] != n_coefficients:
            raise ContractViolationError(f"analysis matrix needs {n_coefficients} rows, has {self.analysis.shape[0]}")
        if self.synthesis.shape != (latent_channels, n_coefficients):
            raise ContractViolationError(f"synthesis matrix shape {self.synthesis.shape} does not match the analysis")
        if self.projection.shape[0] != latent_channels:
            raise ContractViolationError(f"projection matrix shape {self.projection.shape} does not match the analysis")
        if self.unprojection.shape[1] != latent_channels or self.unprojection.shape[0] % code_dim != 0:
            raise ContractViolationError(
                f"unprojection matrix shape {self.unprojection.shape} does not match the projection"
            )
        if self.beta < 0 or self.learning_rate < 0:
            raise InputError("beta and learning_rate must be non-negative")

    @property
    def n_coefficients(self) -> int:
        return self.analysis.shape[0]

    @property
    def latent_channels(self) -> int:
        return self.analysis.shape[1]

    @property
    def code_dim(self) -> int:
        return self.projection.shape[1]

    @property
    def levels(self) -> int:
        return self.unprojection.shape[0] // self.code_dim

    def parameter_count(self) -> int:
        return self.analysis.size + self.synthesis.size + self.projection.size + self.unprojection.size


@dataclass
class LossBreakdown:
    reconstruction: float
    commitment: float

    @property
    def total(self) -> float:
        return self.reconstruction + self.commitment


@dataclass
class CodecGradients:
    analysis: np.ndarray
    synthesis: np.ndarray
    projection: np.ndarray
    unprojection: np.ndarray


@dataclass
class AdamState:
    """Step count and moment estimates of the gradient-trained matrices, keyed by matrix name."""

    step: int = 0
    first: Dict[str, np.ndarray] = field(default_factory=dict)
    second: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class StepResult:
    """Outcome of one straight-through training step."""

    loss: LossBreakdown
    codec: LinearCodec
    codebook: Codebook
    assignment: AssignmentResult
    z_e: np.ndarray
    optimizer: AdamState


def selection_matrix(rows: int, cols: int, offset: int = 0) -> np.ndarray:
    """Identity-like `rows x cols` embedding mapping column j to row `(offset + j) % rows`."""
    matrix = np.zeros((rows, cols))
    for col in range(min(rows, cols)):
        matrix[(offset + col) % rows, col] = 1.0

    return matrix


@lru_cache(maxsize=None)
def dct_basis(patch_size: int) -> np.ndarray:
    """Orthonormal type-II DCT matrix `C` with `C @ x` the transform of a length `patch_size` signal."""
    if patch_size < 1:
        raise InputError(f"patch size must be positive, got {patch_size}")

    if patch_size % 2:
        # cv2.dct only takes even lengths
        basis = dct_closed_form(patch_size)
    else:
        # cv2.dct with DCT_ROWS transforms each row of the identity, giving the transposed basis
        basis = cv2.dct(np.eye(patch_size, dtype=np.float64), flags=cv2.DCT_ROWS).T
    basis.setflags(write=False)

    return basis


def dct_closed_form(patch_size: int) -> np.ndarray:
    """`C[k, n] = sqrt(2 / p) cos(pi (2n + 1) k / 2p)`, with row 0 scaled by `1 / sqrt(2)`."""
    k = np.arange(patch_size)[:, None]
    n = np.arange(patch_size)[None, :]
    basis = np.sqrt(2.0 / patch_size) * np.cos(np.pi * (2 * n + 1) * k / (2 * patch_size))
    basis[0] /= np.sqrt(2.0)

    return basis


@lru_cache(maxsize=None)
def block_dct_matrix(patch_size: int, channels: int) -> np.ndarray:
    """Per-cell 2-D DCT acting on a flattened `(p, p, channels)` patch, channels transformed independently."""
    basis = dct_basis(patch_size)
    matrix = np.kron(np.kron(basis, basis), np.eye(channels))
    matrix.setflags(write=False)

    return matrix


def low_frequency_order(patch_size: int, channels: int) -> np.ndarray:
    """Coefficient indices of a flattened patch, lowest spatial frequency (u + v) first."""
    keys = [
        (u + v, u, channel, (u * patch_size + v) * channels + channel)
        for u in range(patch_size)
        for v in range(patch_size)
        for channel in range(channels)
    ]

    return np.array([key[-1] for key in sorted(keys)])


def new_codec(
    patch_size: int,
    channels: int,
    latent_channels: int,
    code_dim: int,
    levels: int = 1,
    learning_rate: float = DEFAULT_LEARNING_RATE,
    beta: float = DEFAULT_BETA,
) -> LinearCodec:
    """Codec whose analysis keeps the `latent_channels` lowest-frequency DCT coefficients.

    The analysis matrix has orthonormal columns and the synthesis is its transpose. The projection is an
    identity-like embedding. With several levels, level i of the unprojection reads back the
    channels starting at `i * code_dim` (wrapping around), so each level decodes its own band.
    """
    n_coefficients = patch_size * patch_size * channels
    if not 1 <= latent_channels <= n_coefficients:
        raise InputError(f"latent_channels must be in [1, {n_coefficients}], got {latent_channels}")

    analysis = np.eye(n_coefficients)[:, low_frequency_order(patch_size, channels)[:latent_channels]]
    blocks = [_level_unprojection(latent_channels, code_dim, level) for level in range(levels)]

    return LinearCodec(
        patch_size=patch_size,
        channels=channels,
        analysis=analysis,
        synthesis=analysis.T.copy(),
        projection=selection_matrix(latent_channels, code_dim),
        unprojection=np.vstack(blocks),
        learning_rate=learning_rate,
        beta=beta,
    )


def _level_unprojection(latent_channels: int, code_dim: int, level: int) -> np.ndarray:
    """Unprojection block of one level; levels that would overlap the bottom band start at zero."""
    offset = level * code_dim
    if level > 0 and offset + code_dim > latent_channels:
        return np.zeros((code_dim, latent_channels))

    return selection_matrix(latent_channels, code_dim, offset).T


def patchify(image: np.ndarray, patch_size: int) -> np.ndarray:
    """Cut an image (or batch) into non-overlapping `p x p` patches, one flattened patch per grid cell.

    Cell `(i, j)` holds pixels `[i*p:(i+1)*p, j*p:(j+1)*p]` in row-major order, channels innermost.
    """
    *lead, height, width, channels = image.shape
    if height % patch_size or width % patch_size:
        raise InputError(
            f"image of size {height}x{width} is not divisible by patch size {patch_size}; "
            f"height and width must be multiples of {patch_size}"
        )

    grid_h, grid_w = height // patch_size, width // patch_size
    patches = image.reshape(*lead, grid_h, patch_size, grid_w, patch_size, channels)
    patches = np.swapaxes(patches, -4, -3)

    return patches.reshape(*lead, grid_h, grid_w, patch_size * patch_size * channels)


def unpatchify(grid: np.ndarray, patch_size: int, channels: int) -> np.ndarray:
    """Inverse of `patchify`."""
    *lead, grid_h, grid_w, dim = grid.shape
    check_dim(grid, patch_size * patch_size * channels, "patch grid")

    patches = grid.reshape(*lead, grid_h, grid_w, patch_size, patch_size, channels)
    patches = np.swapaxes(patches, -4, -3)

    return patches.reshape(*lead, grid_h * patch_size, grid_w * patch_size, channels)


def block_transform(grid: np.ndarray, patch_size: int, channels: int, direction: str = FORWARD) -> np.ndarray:
    """Apply the orthonormal 2-D DCT (or its inverse) to every cell of a patch grid."""
    matrix = block_dct_matrix(patch_size, channels)
    check_dim(grid, matrix.shape[0], "patch grid")

    rows = to_rows(grid)
    if direction == FORWARD:
        out = rows @ matrix.T
    elif direction == INVERSE:
        out = rows @ matrix
    else:
        raise ContractViolationError(f"unknown transform direction {direction!r}")

    return from_rows(out, grid.shape[:-1])


def project(grid: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Per-cell linear map `cell @ matrix` (the 1x1 convolution of a latent grid)."""
    check_dim(grid, matrix.shape[0], "latent grid")

    return from_rows(to_rows(grid) @ matrix, grid.shape[:-1])


def unproject(grid: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    return project(grid, matrix)


def downsample2x(grid: np.ndarray) -> np.ndarray:
    """2x2 average pooling of a latent grid."""
    grid_h, grid_w = grid.shape[-3], grid.shape[-2]
    if grid_h % 2 or grid_w % 2:
        raise InputError(f"cannot downsample a {grid_h}x{grid_w} grid, both sides must be even")

    # Pairwise sums keep constant grids exact
    pair_sum = (grid[..., 0::2, 0::2, :] + grid[..., 0::2, 1::2, :]) + (
        grid[..., 1::2, 0::2, :] + grid[..., 1::2, 1::2, :]
    )

    return pair_sum * 0.25


def upsample2x(grid: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsampling of a latent grid."""
    return np.repeat(np.repeat(grid, 2, axis=-3), 2, axis=-2)


def upsample2x_adjoint(grid: np.ndarray) -> np.ndarray:
    """Adjoint of `upsample2x`: sum of each 2x2 block."""
    return downsample2x(grid) * 4.0


def downsample2x_adjoint(grid: np.ndarray) -> np.ndarray:
    """Adjoint of `downsample2x`."""
    return upsample2x(grid) * 0.25


def encode_coefficients(codec: LinearCodec, images: np.ndarray) -> np.ndarray:
    """Patchify and DCT-transform images into a grid of patch coefficients."""
    if images.shape[-1] != codec.channels:
        raise ContractViolationError(f"images have {images.shape[-1]} channels, codec expects {codec.channels}")

    return block_transform(patchify(images, codec.patch_size), codec.patch_size, codec.channels, FORWARD)


def decode_coefficients(codec: LinearCodec, coefficients: np.ndarray) -> np.ndarray:
    """Inverse DCT and unpatchify. The result is not clamped."""
    patches = block_transform(coefficients, codec.patch_size, codec.channels, INVERSE)

    return unpatchify(patches, codec.patch_size, codec.channels)


def encode(codec: LinearCodec, coefficients: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Return `(z_o, z_e)`: the analysis output and its projection into the quantization space."""
    z_o = project(coefficients, codec.analysis)

    return z_o, project(z_o, codec.projection)


def decode(codec: LinearCodec, z_q: np.ndarray) -> np.ndarray:
    """Map quantized codes back to patch coefficients."""
    return project(unproject(z_q, codec.unprojection), codec.synthesis)


def mean_squared(diff: np.ndarray) -> float:
    return float(np.mean(diff * diff))


def loss_and_gradients(
    codec: LinearCodec, coefficients: np.ndarray, z_o: np.ndarray, z_e: np.ndarray, z_q: np.ndarray
) -> Tuple[LossBreakdown, CodecGradients]:
    """Straight-through loss and gradients of a single-level codec at fixed assignments.

    The decoder sees `z_q`; its gradient is copied to `z_e` unchanged and the commitment term adds
    `2 beta (z_e - z_q) / numel`. Squared errors are means over elements.
    """
    z_d = unproject(z_q, codec.unprojection)
    residual = project(z_d, codec.synthesis) - coefficients

    loss = LossBreakdown(
        reconstruction=mean_squared(residual),
        commitment=codec.beta * mean_squared(z_e - z_q),
    )

    grad_reconstruction = 2.0 * residual / residual.size
    grad_synthesis = outer_sum(z_d, grad_reconstruction)
    grad_z_d = project(grad_reconstruction, codec.synthesis.T)
    grad_unprojection = outer_sum(z_q, grad_z_d)
    grad_z_q = project(grad_z_d, codec.unprojection.T)

    grad_z_e = grad_z_q + 2.0 * codec.beta * (z_e - z_q) / z_e.size
    grad_projection = outer_sum(z_o, grad_z_e)
    grad_z_o = project(grad_z_e, codec.projection.T)
    grad_analysis = outer_sum(coefficients, grad_z_o)

    return loss, CodecGradients(grad_analysis, grad_synthesis, grad_projection, grad_unprojection)


def straight_through_loss(
    codec: LinearCodec, coefficients: np.ndarray, z_q: np.ndarray, offset: np.ndarray
) -> LossBreakdown:
    """Loss whose exact gradient is the straight-through gradient of `loss_and_gradients`.

    The decoder input is `z_e + offset` with `offset` frozen; choosing `offset = z_q - z_e` at the
    current parameters reproduces the forward value. Used to check gradients by finite differences.
    """
    _, z_e = encode(codec, coefficients)
    residual = decode(codec, z_e + offset) - coefficients

    return LossBreakdown(
        reconstruction=mean_squared(residual),
        commitment=codec.beta * mean_squared(z_e - z_q),
    )


def named_matrices(owner, names: Sequence[str] = CODEC_PARAMETERS) -> Dict[str, np.ndarray]:
    return {name: getattr(owner, name) for name in names}


def adam_update(
    params: Dict[str, np.ndarray], gradients: Dict[str, np.ndarray], state: AdamState, learning_rate: float
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """One bias-corrected Adam step over every named matrix.

    Updated matrices are rounded to float32, the precision of the checkpoints. Moments of names seen for
    the first time start at zero.
    """
    step = state.step + 1
    first_correction = 1.0 - ADAM_BETA1**step
    second_correction = 1.0 - ADAM_BETA2**step

    updated, first, second = {}, {}, {}
    for name, value in params.items():
        gradient = gradients[name]
        first[name] = ADAM_BETA1 * state.first.get(name, 0.0) + (1.0 - ADAM_BETA1) * gradient
        second[name] = ADAM_BETA2 * state.second.get(name, 0.0) + (1.0 - ADAM_BETA2) * gradient * gradient

        direction = (first[name] / first_correction) / (np.sqrt(second[name] / second_correction) + ADAM_EPS)
        with np.errstate(over="ignore"):
            updated[name] = to_f32(value - learning_rate * direction)

    return updated, AdamState(step=step, first=first, second=second)


def apply_gradients(
    codec: LinearCodec, gradients: CodecGradients, learning_rate: float, optimizer: Optional[AdamState] = None
) -> Tuple[LinearCodec, AdamState]:
    """One Adam step on the four codec matrices; returns the new codec and optimizer state."""
    state = optimizer if optimizer is not None else AdamState()
    params, state = adam_update(named_matrices(codec), named_matrices(gradients), state, learning_rate)

    return replace(codec, **params), state


def quantize_grid(z_e: np.ndarray, codebook: Codebook) -> Tuple[np.ndarray, AssignmentResult]:
    """Quantize every cell of a latent grid; returns the quantized grid and the flat assignment."""
    assignment = nearest_assign(to_rows(z_e), codebook)

    return from_rows(assignment.quantized, z_e.shape[:-1]), assignment


def check_latent_finite(z_e: np.ndarray, step: int) -> None:
    if not np.isfinite(z_e).all():
        raise TrainingDivergenceError(step, "encoder output is not finite")


def straight_through_step(
    codec: LinearCodec,
    codebook: Codebook,
    images: np.ndarray,
    step: int = 0,
    learning_rate: Optional[float] = None,
    optimizer: Optional[AdamState] = None,
) -> StepResult:
    """One training step of a single-level codec on a batch of images.

    The codec takes an Adam step on reconstruction plus commitment loss; the codebook is moved by
    `ema_update` only. Pass the returned `optimizer` to the next step.
    """
    if images.ndim != 4 or images.shape[0] == 0:
        raise InputError("a training batch must be a non-empty (B, H, W, C) array")
    if codec.levels != 1 or codec.code_dim != codebook.dim:
        raise ContractViolationError(
            f"codec with code_dim {codec.code_dim} and {codec.levels} levels "
            f"cannot use a codebook of dim {codebook.dim}"
        )

    coefficients = encode_coefficients(codec, images)
    z_o, z_e = encode(codec, coefficients)
    check_latent_finite(z_e, step)

    z_q, assignment = quantize_grid(z_e, codebook)
    loss, gradients = loss_and_gradients(codec, coefficients, z_o, z_e, z_q)
    if not np.isfinite(loss.total):
        raise TrainingDivergenceError(step, f"loss is {loss.total}")

    rate = codec.learning_rate if learning_rate is None else learning_rate
    updated, optimizer = apply_gradients(codec, gradients, rate, optimizer)

    return StepResult(
        loss=loss,
        codec=updated,
        codebook=ema_update(codebook, to_rows(z_e), assignment),
        assignment=assignment,
        z_e=z_e,
        optimizer=optimizer,
    )
