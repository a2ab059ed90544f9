"""This module contains utility functions that check the contracts of arrays passed between tasks."""
from typing import Sequence

import numpy as np

from ..errors import ContractViolationError, InputError


def check_finite_rows(matrix: np.ndarray, name: str) -> None:
    """Raise an `InputError` naming the first row of `matrix` holding a NaN or infinity."""
    finite_rows = np.isfinite(matrix).reshape(matrix.shape[0], -1).all(axis=1)
    if not finite_rows.all():
        row = int(np.argmin(finite_rows))
        raise InputError(f"{name} has a non-finite value in row {row}", row=row)


def check_dim(matrix: np.ndarray, dim: int, name: str) -> None:
    """Checks that the last axis of `matrix` has length `dim`."""
    if matrix.ndim < 1 or matrix.shape[-1] != dim:
        raise ContractViolationError(f"{name} has dimension {matrix.shape[-1:]} but {dim} is required")


def check_same_shape(first: np.ndarray, second: np.ndarray, names: Sequence[str]) -> None:
    """Checks that two arrays have identical shapes."""
    if first.shape != second.shape:
        raise ContractViolationError(f"shape mismatch: {names[0]}{first.shape} vs {names[1]}{second.shape}")


def to_f32(values) -> np.ndarray:
    """Round `values` to the nearest float32 and return them as float64, the precision the checkpoints store."""
    return np.asarray(values, dtype=np.float32).astype(np.float64)
