"""This module contains reconstruction and codebook utilization metrics: MSE, PSNR, perplexity,
Lorenz curve and Gini coefficient."""
import math
from dataclasses import dataclass
from typing import List, Tuple

import numpy as np

from ..errors import InputError
from ..utils.array_utils import check_same_shape

# PSNR of two identical images; reports print it as EXACT_PSNR_MARKER
PSNR_EXACT = math.inf
EXACT_PSNR_MARKER = "exact"
PEAK_VALUE = 1.0


@dataclass
class UsageStats:
    """Assignment counts of every code over an evaluation set."""

    counts: np.ndarray

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.counts.ndim != 1 or self.counts.size == 0:
            raise InputError("usage counts must be a non-empty vector")
        if (self.counts < 0).any():
            raise InputError("usage counts must be non-negative")

    @classmethod
    def from_indices(cls, indices: np.ndarray, size: int) -> "UsageStats":
        return cls(np.bincount(np.asarray(indices).ravel(), minlength=size))

    @property
    def size(self) -> int:
        return self.counts.size

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merged(self, other: "UsageStats") -> "UsageStats":
        return UsageStats(self.counts + other.counts)


@dataclass
class LorenzCurve:
    """`size + 1` points from (0, 0) to (1, 1): cumulative code fraction against cumulative share of
    assignments, codes sorted from least to most used."""

    code_fraction: np.ndarray
    assignment_share: np.ndarray

    def points(self) -> List[Tuple[float, float]]:
        return list(zip(self.code_fraction.tolist(), self.assignment_share.tolist()))


def mse(image: np.ndarray, reconstruction: np.ndarray) -> float:
    check_same_shape(image, reconstruction, ("image", "reconstruction"))
    diff = np.asarray(image, dtype=np.float64) - np.asarray(reconstruction, dtype=np.float64)

    return float(np.mean(diff * diff))


def psnr_from_mse(error: float) -> float:
    if error == 0:
        return PSNR_EXACT

    return 10.0 * math.log10(PEAK_VALUE * PEAK_VALUE / error)


def psnr(image: np.ndarray, reconstruction: np.ndarray) -> float:
    """Peak signal to noise ratio in dB for pixels in [0, 1]; `PSNR_EXACT` for identical images."""
    return psnr_from_mse(mse(image, reconstruction))


def format_psnr(value: float):
    """PSNR as written to reports: the exact marker instead of infinity."""
    return EXACT_PSNR_MARKER if math.isinf(value) else value


def _probabilities(stats: UsageStats) -> np.ndarray:
    if stats.total == 0:
        raise InputError("usage statistics hold no assignments")

    return stats.counts / stats.total


def perplexity(stats: UsageStats) -> float:
    """Exponential of the Shannon entropy of the assignment distribution (effective number of codes)."""
    probabilities = _probabilities(stats)
    used = probabilities[probabilities > 0]
    entropy = -float(np.sum(used * np.log(used)))

    return math.exp(entropy)


def normalized_perplexity(stats: UsageStats) -> float:
    return perplexity(stats) / stats.size


def lorenz(stats: UsageStats) -> LorenzCurve:
    """Lorenz curve of code usage, codes sorted ascending by assignment count."""
    probabilities = _probabilities(stats)
    shares = np.concatenate([[0.0], np.cumsum(np.sort(probabilities))])
    # Pin the last point, cumsum of rounded shares may miss 1 by an ulp
    shares[-1] = 1.0
    fractions = np.arange(stats.size + 1) / stats.size

    return LorenzCurve(code_fraction=fractions, assignment_share=shares)


def gini(stats: UsageStats) -> float:
    """One minus twice the trapezoid area under the Lorenz curve: 0 for uniform use, (K-1)/K for one code."""
    curve = lorenz(stats)
    heights = curve.assignment_share
    area = float(np.sum((heights[1:] + heights[:-1]) * 0.5) / stats.size)

    return 1.0 - 2.0 * area
