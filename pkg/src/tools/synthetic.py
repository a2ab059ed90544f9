"""This module contains the generators of the synthetic image corpus.

Kinds are written as `name` or `name:parameter`:

    gaussian_field:L   smooth random texture whose autocorrelation falls to 1/e at lag L pixels
    checkerboard:P     two-level checkerboard with P x P squares and a random phase
    edges              one straight step edge of random orientation between two random levels
    mixed              equal shares of gaussian_field:4, gaussian_field:16, checkerboard:8 and edges
"""
from typing import Callable, Dict, Optional, Tuple

import cv2
import numpy as np

from ..errors import ConfigError

DEFAULT_IMAGE_SIZE = 64
DEFAULT_CORRELATION_LENGTH = 8.0
DEFAULT_CHECKER_SIZE = 8
MIXED_KINDS = ("gaussian_field:4", "gaussian_field:16", "checkerboard:8", "edges")
PARAMETRIZED_KINDS = ("gaussian_field", "checkerboard")

# Gaussian fields are standardized per image and mapped to FIELD_MEAN + FIELD_SCALE * z
FIELD_MEAN = 0.5
FIELD_SCALE = 0.15
# Step edges keep at least this contrast between their two levels
MIN_EDGE_CONTRAST = 0.2


def parse_kind(kind: str) -> Tuple[str, Optional[float]]:
    name, _, parameter = kind.partition(":")
    if name not in GENERATORS and name != "mixed":
        raise ConfigError(f"unknown corpus kind {kind!r}, expected one of {sorted([*GENERATORS, 'mixed'])}")
    if not parameter:
        return name, None
    if name not in PARAMETRIZED_KINDS:
        raise ConfigError(f"corpus kind {name!r} takes no parameter, got {kind!r}")

    try:
        value = float(parameter)
    except ValueError:
        raise ConfigError(f"corpus kind {kind!r} has a non-numeric parameter") from None
    if value <= 0:
        raise ConfigError(f"corpus kind {kind!r} needs a positive parameter")

    return name, value


def gaussian_field(
    rng: np.random.Generator, size: int, channels: int, correlation_length: Optional[float]
) -> np.ndarray:
    """White noise blurred with a Gaussian of sigma L / 2, whose autocorrelation is exp(-r^2 / L^2)."""
    length = DEFAULT_CORRELATION_LENGTH if correlation_length is None else correlation_length
    sigma = length / 2.0
    pad = int(np.ceil(4 * sigma))

    noise = rng.standard_normal((size + 2 * pad, size + 2 * pad, channels))
    field = cv2.GaussianBlur(noise, (0, 0), sigmaX=sigma, sigmaY=sigma, borderType=cv2.BORDER_REFLECT)
    field = field.reshape(noise.shape)[pad : pad + size, pad : pad + size]
    field = (field - field.mean()) / max(field.std(), np.finfo(float).tiny)

    return np.clip(FIELD_MEAN + FIELD_SCALE * field, 0.0, 1.0)


def checkerboard(rng: np.random.Generator, size: int, channels: int, square: Optional[float]) -> np.ndarray:
    square = DEFAULT_CHECKER_SIZE if square is None else int(square)
    offset_y, offset_x = rng.integers(0, 2 * square, size=2)
    rows = (np.arange(size) + offset_y) // square
    cols = (np.arange(size) + offset_x) // square
    board = ((rows[:, None] + cols[None, :]) % 2).astype(np.float64)

    return np.repeat(board[..., None], channels, axis=2)


def edges(rng: np.random.Generator, size: int, channels: int, _: Optional[float] = None) -> np.ndarray:
    angle = rng.uniform(0.0, 2.0 * np.pi)
    center = rng.uniform(0.25 * size, 0.75 * size, size=2)
    low = rng.uniform(0.0, 1.0 - MIN_EDGE_CONTRAST)
    high = rng.uniform(low + MIN_EDGE_CONTRAST, 1.0)

    coords = np.arange(size) + 0.5
    side = (coords[None, :] - center[1]) * np.cos(angle) + (coords[:, None] - center[0]) * np.sin(angle)
    image = np.where(side >= 0, high, low)

    return np.repeat(image[..., None], channels, axis=2)


GENERATORS: Dict[str, Callable[[np.random.Generator, int, int, Optional[float]], np.ndarray]] = {
    "gaussian_field": gaussian_field,
    "checkerboard": checkerboard,
    "edges": edges,
}


def gen_synthetic(kind: str, count: int, seed: int, size: int = DEFAULT_IMAGE_SIZE, channels: int = 1) -> np.ndarray:
    """Generate `count` images of shape (size, size, channels) in [0, 1]; identical for equal seeds."""
    name, parameter = parse_kind(kind)
    if count < 0 or size < 1 or channels < 1:
        raise ConfigError(f"invalid corpus shape (count={count}, size={size}, channels={channels})")

    if name == "mixed":
        return _mixed(count, seed, size, channels)

    rng = np.random.default_rng(seed)
    generator = GENERATORS[name]
    images = [generator(rng, size, channels, parameter) for _ in range(count)]

    return np.stack(images) if images else np.zeros((0, size, size, channels))


def _mixed(count: int, seed: int, size: int, channels: int) -> np.ndarray:
    shares = np.full(len(MIXED_KINDS), count // len(MIXED_KINDS))
    shares[: count % len(MIXED_KINDS)] += 1
    parts = [
        gen_synthetic(kind, int(share), seed + index + 1, size, channels)
        for index, (kind, share) in enumerate(zip(MIXED_KINDS, shares))
    ]
    images = np.concatenate(parts)

    return images[np.random.default_rng(seed).permutation(count)]
