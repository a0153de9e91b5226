"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def as_vector(v, name: str = "vector") -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    check_finite(v, name)
    return v


def as_matrix(m, name: str = "matrix") -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {m.shape}")
    check_finite(m, name)
    return m


def check_finite(a: np.ndarray, name: str) -> None:
    if not np.all(np.isfinite(a)):
        raise FloatingPointError(f"{name} contains NaN or Inf")


def check_divides(k: int, d_ff: int) -> int:
    """Expert count must evenly divide the hidden width; returns d_e."""
    if k < 1 or d_ff % k != 0:
        raise ValueError(f"number of experts k={k} must divide d_ff={d_ff}")
    return d_ff // k
