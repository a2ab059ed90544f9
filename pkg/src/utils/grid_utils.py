"""This module contains utility functions that move latent grids between their spatial
layout `(..., grid_h, grid_w, dim)` and the flat row layout `(N, dim)` used by the quantizer."""
from typing import Tuple

import numpy as np


def to_rows(grid: np.ndarray) -> np.ndarray:
    """Flatten every leading axis so each latent cell becomes one row."""
    return grid.reshape(-1, grid.shape[-1])


def from_rows(rows: np.ndarray, leading_shape: Tuple[int, ...]) -> np.ndarray:
    """Inverse of `to_rows` given the leading shape of the original grid."""
    return rows.reshape(*leading_shape, rows.shape[-1])


def outer_sum(left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Sum of per-cell outer products `left_i^T right_i` over all cells.

    This is the gradient of a per-cell linear map `right = left @ W` with respect to `W`.
    """
    return to_rows(left).T @ to_rows(right)
