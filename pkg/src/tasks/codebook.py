"""This module contains the codebook and the functions that learn and maintain it: nearest code
assignment, EMA updates, initialization, dead code detection and dead code reset."""
import logging
from collections import deque
from dataclasses import dataclass, replace
from typing import Deque, Iterable, Set

import numpy as np

from ..errors import ContractViolationError, InputError
from ..utils.array_utils import check_dim, check_finite_rows, check_same_shape, to_f32

logger = logging.getLogger(__name__)

DEFAULT_DECAY = 0.99
DEFAULT_SMOOTHING_EPS = 1e-5

# A code is dead when it is assigned fewer than DEFAULT_DEAD_THRESHOLD vectors
# over the last DEFAULT_WINDOW_LEN batches.
DEFAULT_WINDOW_LEN = 10
DEFAULT_DEAD_THRESHOLD = 2

# A reset code is the mean of RESET_SAMPLE_SIZE recent outputs plus Gaussian jitter whose
# standard deviation is RESET_JITTER_SCALE times the per-dimension std of the recent outputs.
RESET_SAMPLE_SIZE = 8
RESET_JITTER_SCALE = 0.01
INIT_JITTER_SCALE = 0.01

# Number of floats one block of the exhaustive distance computation may hold
ASSIGN_BLOCK_ELEMENTS = 1 << 22


@dataclass
class Codebook:
    """K prototype vectors of dimension D plus the EMA statistics that move them.

    `entries[k]` is `ema_sums[k]` divided by the smoothed `ema_counts[k]` after an EMA update, rounded to
    float32 like every array of the codebook.
    K and D never change; every function in this module returns a new `Codebook`.
    """

    entries: np.ndarray
    ema_counts: np.ndarray
    ema_sums: np.ndarray
    decay: float = DEFAULT_DECAY
    smoothing_eps: float = DEFAULT_SMOOTHING_EPS

    def __post_init__(self):
        # Held at float32 precision so a checkpoint restores the codebook bit for bit
        self.entries = to_f32(self.entries)
        self.ema_counts = to_f32(self.ema_counts)
        self.ema_sums = to_f32(self.ema_sums)
        self.decay = float(to_f32(self.decay))
        self.smoothing_eps = float(to_f32(self.smoothing_eps))

        if self.entries.ndim != 2 or self.entries.shape[0] < 1 or self.entries.shape[1] < 1:
            raise ContractViolationError(f"codebook entries must be a non-empty K x D matrix, got {self.entries.shape}")
        if self.ema_counts.shape != (self.size,) or self.ema_sums.shape != self.entries.shape:
            raise ContractViolationError("EMA statistics do not match the codebook shape")
        if not (np.isfinite(self.entries).all() and np.isfinite(self.ema_sums).all()):
            raise InputError("codebook holds non-finite values")
        if (self.ema_counts < 0).any():
            raise InputError("EMA counts must be non-negative")
        if not 0.0 <= self.decay < 1.0:
            raise InputError(f"decay must lie in [0, 1), got {self.decay}")
        if self.smoothing_eps <= 0:
            raise InputError(f"smoothing_eps must be positive, got {self.smoothing_eps}")

    @property
    def size(self) -> int:
        return self.entries.shape[0]

    @property
    def dim(self) -> int:
        return self.entries.shape[1]


@dataclass
class AssignmentResult:
    """Nearest code of each input row.

    Attributes:
        indices: Code index of each row.
        quantized: Row n is a copy of the codebook entry `indices[n]`.
        distances: Squared Euclidean distance of each row to its code.
    """

    indices: np.ndarray
    quantized: np.ndarray
    distances: np.ndarray

    def counts(self, size: int) -> np.ndarray:
        """Number of rows assigned to each of the `size` codes."""
        return np.bincount(self.indices, minlength=size).astype(np.int64)


class UsageWindow:
    """Ring buffer of per-batch assignment counts used to find dead codes.

    A code is armed for detection once it has been observed for `window_len` batches. Every code
    starts unarmed, and `restart` disarms the codes that were just reset.
    """

    def __init__(self, size: int, window_len: int = DEFAULT_WINDOW_LEN, threshold: int = DEFAULT_DEAD_THRESHOLD):
        if size < 1 or window_len < 1 or threshold < 0:
            raise InputError(f"invalid usage window (size={size}, window_len={window_len}, threshold={threshold})")

        self.size = size
        self.window_len = window_len
        self.threshold = threshold
        self.per_batch_counts: Deque[np.ndarray] = deque(maxlen=window_len)
        self._observed_batches = np.zeros(size, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.per_batch_counts)

    @property
    def is_full(self) -> bool:
        return len(self.per_batch_counts) == self.window_len

    def push(self, counts: np.ndarray) -> None:
        """Append the assignment counts of one batch, dropping the oldest batch when full."""
        counts = np.asarray(counts)
        if counts.shape != (self.size,):
            raise ContractViolationError(f"batch counts have shape {counts.shape} but ({self.size},) is required")
        if (counts < 0).any():
            raise InputError("batch counts must be non-negative")

        self.per_batch_counts.append(counts.astype(np.int64))
        self._observed_batches = np.minimum(self._observed_batches + 1, self.window_len)

    def push_indices(self, indices: np.ndarray) -> None:
        self.push(np.bincount(indices, minlength=self.size))

    def aggregate(self) -> np.ndarray:
        """Per-code sum of the counts of the buffered batches."""
        if not self.per_batch_counts:
            return np.zeros(self.size, dtype=np.int64)

        return np.sum(self.per_batch_counts, axis=0)

    def armed(self) -> np.ndarray:
        """Mask of the codes whose history covers a full window."""
        return self._observed_batches >= self.window_len

    def restart(self, codes: Iterable[int]) -> None:
        """Forget the history of `codes` so they are judged again only after a full window."""
        codes = sorted(codes)
        if not codes:
            return

        for batch_counts in self.per_batch_counts:
            batch_counts[codes] = 0
        self._observed_batches[codes] = 0


def nearest_assign(vectors: np.ndarray, codebook: Codebook) -> AssignmentResult:
    """Assign every row of `vectors` to its nearest codebook entry by squared Euclidean distance.

    The search is exhaustive. Ties go to the lowest code index, which is what `np.argmin` returns.
    Rows are processed in blocks so the `(rows, K, D)` difference tensor stays bounded.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2:
        raise ContractViolationError(f"vectors must be an N x D matrix, got shape {vectors.shape}")
    check_dim(vectors, codebook.dim, "vectors")
    check_finite_rows(vectors, "vectors")

    entries = codebook.entries
    n_rows = vectors.shape[0]
    indices = np.empty(n_rows, dtype=np.int64)
    distances = np.empty(n_rows, dtype=np.float64)

    block = max(1, ASSIGN_BLOCK_ELEMENTS // (codebook.size * codebook.dim))
    for start in range(0, n_rows, block):
        stop = min(start + block, n_rows)
        diff = vectors[start:stop, None, :] - entries[None, :, :]
        block_distances = np.sum(diff * diff, axis=-1)

        block_indices = np.argmin(block_distances, axis=1)
        indices[start:stop] = block_indices
        distances[start:stop] = block_distances[np.arange(stop - start), block_indices]

    return AssignmentResult(indices=indices, quantized=entries[indices], distances=distances)


def smoothed_counts(ema_counts: np.ndarray, smoothing_eps: float) -> np.ndarray:
    """Laplace smoothing of the EMA counts, renormalized to keep the total mass."""
    total = ema_counts.sum()
    if total <= 0:
        return ema_counts + smoothing_eps

    return (ema_counts + smoothing_eps) / (total + ema_counts.shape[0] * smoothing_eps) * total


def ema_update(codebook: Codebook, vectors: np.ndarray, assignment: AssignmentResult) -> Codebook:
    """Move every code to the exponential moving average of the vectors assigned to it.

    Codes without assignments in this batch still decay their counts and sums, which leaves
    their entry unchanged apart from the smoothing renormalization.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.shape[0] != assignment.indices.shape[0]:
        raise ContractViolationError(
            f"{vectors.shape[0]} vectors but {assignment.indices.shape[0]} assignments were given"
        )
    check_dim(vectors, codebook.dim, "vectors")

    batch_counts = np.bincount(assignment.indices, minlength=codebook.size).astype(np.float64)
    batch_sums = np.zeros_like(codebook.ema_sums)
    np.add.at(batch_sums, assignment.indices, vectors)

    decay = codebook.decay
    ema_counts = decay * codebook.ema_counts + (1.0 - decay) * batch_counts
    ema_sums = decay * codebook.ema_sums + (1.0 - decay) * batch_sums
    entries = ema_sums / smoothed_counts(ema_counts, codebook.smoothing_eps)[:, None]

    return replace(codebook, entries=entries, ema_counts=ema_counts, ema_sums=ema_sums)


def _from_entries(entries: np.ndarray, decay: float, smoothing_eps: float) -> Codebook:
    """Codebook whose EMA state makes `entries` the fixed point of the first update."""
    return Codebook(
        entries=entries,
        ema_counts=np.ones(entries.shape[0]),
        ema_sums=entries.copy(),
        decay=decay,
        smoothing_eps=smoothing_eps,
    )


def init_from_samples(
    samples: np.ndarray,
    size: int,
    rng_seed: int,
    decay: float = DEFAULT_DECAY,
    smoothing_eps: float = DEFAULT_SMOOTHING_EPS,
) -> Codebook:
    """Initialize a codebook of `size` entries from rows of `samples`.

    With at least `size` samples the entries are a random subset of distinct rows. With fewer
    samples every row is used once and the missing entries are re-drawn rows with small jitter.
    """
    samples = np.asarray(samples, dtype=np.float64)
    if samples.ndim != 2 or samples.shape[0] == 0:
        raise InputError("init_from_samples needs at least one sample row")
    if size < 1:
        raise InputError(f"codebook size must be positive, got {size}")
    check_finite_rows(samples, "samples")

    rng = np.random.default_rng(rng_seed)
    n_samples = samples.shape[0]

    if n_samples >= size:
        chosen = rng.choice(n_samples, size=size, replace=False)
        entries = samples[chosen].copy()
    else:
        logger.warning("only %d samples for %d codes, re-drawing samples with jitter", n_samples, size)
        extra = rng.integers(0, n_samples, size=size - n_samples)
        jitter = rng.normal(size=(size - n_samples, samples.shape[1])) * INIT_JITTER_SCALE * samples.std(axis=0)
        entries = np.concatenate([samples, samples[extra] + jitter])

    return _from_entries(entries, decay, smoothing_eps)


def init_uniform(
    size: int, dim: int, rng_seed: int, decay: float = DEFAULT_DECAY, smoothing_eps: float = DEFAULT_SMOOTHING_EPS
) -> Codebook:
    """Data-independent initialization, uniform in [-1/size, 1/size]."""
    rng = np.random.default_rng(rng_seed)
    entries = rng.uniform(-1.0 / size, 1.0 / size, size=(size, dim))

    return _from_entries(entries, decay, smoothing_eps)


def init_constant(
    vector: np.ndarray, size: int, decay: float = DEFAULT_DECAY, smoothing_eps: float = DEFAULT_SMOOTHING_EPS
) -> Codebook:
    """Every entry equal to `vector`. All assignments then go to code 0 until codes are reset."""
    vector = np.asarray(vector, dtype=np.float64).reshape(1, -1)

    return _from_entries(np.repeat(vector, size, axis=0), decay, smoothing_eps)


def detect_dead_codes(window: UsageWindow) -> Set[int]:
    """Armed codes whose aggregate count over the window is below the window threshold."""
    if len(window) == 0:
        raise ContractViolationError("dead code detection needs at least one batch in the usage window")

    dead = np.flatnonzero(window.armed() & (window.aggregate() < window.threshold))

    return {int(code) for code in dead}


def reset_dead_codes(
    codebook: Codebook,
    dead: Set[int],
    recent_outputs: np.ndarray,
    rng_seed: int,
    sample_size: int = RESET_SAMPLE_SIZE,
    jitter_scale: float = RESET_JITTER_SCALE,
) -> Codebook:
    """Replace each dead code with the mean of a few random recent encoder outputs plus jitter.

    Reset codes restart their EMA statistics with a count of one. Live codes are untouched.
    """
    if not dead:
        return codebook

    recent_outputs = np.asarray(recent_outputs, dtype=np.float64)
    if recent_outputs.ndim != 2 or recent_outputs.shape[0] == 0:
        raise InputError("dead code reset needs at least one recent output")
    check_dim(recent_outputs, codebook.dim, "recent_outputs")
    check_finite_rows(recent_outputs, "recent_outputs")

    invalid = [code for code in dead if not 0 <= code < codebook.size]
    if invalid:
        raise ContractViolationError(f"dead code indices {sorted(invalid)} outside [0, {codebook.size})")

    rng = np.random.default_rng(rng_seed)
    n_recent = recent_outputs.shape[0]
    n_chosen = min(sample_size, n_recent)
    jitter_std = jitter_scale * recent_outputs.std(axis=0)

    entries = codebook.entries.copy()
    ema_counts = codebook.ema_counts.copy()
    ema_sums = codebook.ema_sums.copy()

    for code in sorted(dead):
        chosen = rng.choice(n_recent, size=n_chosen, replace=False)
        entries[code] = recent_outputs[chosen].mean(axis=0) + rng.normal(size=codebook.dim) * jitter_std
        ema_counts[code] = 1.0
        ema_sums[code] = entries[code]

    logger.debug("reset %d dead codes", len(dead))

    return replace(codebook, entries=entries, ema_counts=ema_counts, ema_sums=ema_sums)


def commitment_loss(z_e: np.ndarray, z_q: np.ndarray, beta: float) -> float:
    """`beta` times the mean squared difference between encoder outputs and their codes.

    `z_q` is a constant here; its gradient is computed by the training step, not by this function.
    """
    z_e = np.asarray(z_e, dtype=np.float64)
    z_q = np.asarray(z_q, dtype=np.float64)
    check_same_shape(z_e, z_q, ("z_e", "z_q"))
    if beta < 0:
        raise InputError(f"beta must be non-negative, got {beta}")

    diff = z_e - z_q

    return float(beta * np.mean(diff * diff))
