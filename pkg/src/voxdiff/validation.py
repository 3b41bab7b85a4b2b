"""Small input-validation helpers shared across the package."""

from __future__ import annotations

import numpy as np


def check_probability(value: float, name: str) -> float:
    value = float(value)
    if not np.isfinite(value) or not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value}")
    return value


def check_positive_int(value: int, name: str) -> int:
    if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value < 1:
        raise ValueError(f"{name} must be a positive integer, got {value!r}")
    return int(value)


def check_num_classes(num_classes: int) -> int:
    if not isinstance(num_classes, (int, np.integer)) or num_classes < 2:
        raise ValueError(f"num_classes must be an integer >= 2, got {num_classes!r}")
    return int(num_classes)


def check_timestep(t: int, num_steps: int, *, lowest: int = 1) -> int:
    if not isinstance(t, (int, np.integer)) or not lowest <= t <= num_steps:
        raise ValueError(f"timestep must be in [{lowest}, {num_steps}], got {t!r}")
    return int(t)


def check_finite(arr: np.ndarray, name: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_same_shape(a: np.ndarray, b: np.ndarray, name_a: str, name_b: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{name_a} shape {a.shape} != {name_b} shape {b.shape}")


def is_row_stochastic(mat: np.ndarray, atol: float = 1e-12) -> bool:
    """True if every entry is non-negative and every row sums to 1."""
    return bool(np.all(mat >= -atol) and np.allclose(mat.sum(axis=-1), 1.0, atol=atol))
