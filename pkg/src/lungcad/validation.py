"""Input validation helpers used by the estimators and pipeline stages."""

from __future__ import annotations

import numpy as np


def as_float_array(x, name: str, ndim: int | None = None) -> np.ndarray:
    """Coerce to a float64 ndarray, optionally enforcing dimensionality."""
    arr = np.asarray(x, dtype=np.float64)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if arr.size == 0:
        raise ValueError(f"{name} must be non-empty")
    return arr


def check_unit_interval(x, name: str, tol: float = 1e-9) -> np.ndarray:
    """Validate that all values lie in [0, 1] (within tol)."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.size and (arr.min() < -tol or arr.max() > 1.0 + tol):
        raise ValueError(
            f"{name} values must lie in [0, 1], got range "
            f"[{arr.min():.6g}, {arr.max():.6g}]"
        )
    return arr


def check_same_shape(a, b, name_a: str = "prediction", name_b: str = "target") -> None:
    a_shape = np.shape(a)
    b_shape = np.shape(b)
    if a_shape != b_shape:
        raise ValueError(f"{name_a} shape {a_shape} does not match {name_b} shape {b_shape}")


def check_binary(x, name: str) -> np.ndarray:
    arr = np.asarray(x)
    if not np.isin(np.unique(arr), (0, 1)).all():
        raise ValueError(f"{name} must contain only 0/1 values")
    return arr.astype(np.float64)


def check_rating(value: float, name: str) -> float:
    v = float(value)
    if not np.isfinite(v) or not (1.0 <= v <= 5.0):
        raise ValueError(f"{name} must be a finite value in [1, 5], got {value!r}")
    return v


def check_stacked_images(X, name: str = "X") -> np.ndarray:
    """Validate a batch of 2-D images shaped (n, H, W) with values in [0, 1]."""
    arr = np.asarray(X, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"{name} must be (n, H, W), got shape {arr.shape}")
    check_unit_interval(arr, name)
    return arr
