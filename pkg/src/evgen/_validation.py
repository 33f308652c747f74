"""Exception types and small input-validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np


class ValidationError(ValueError):
    """Input violates a documented contract (geometry, shape, range)."""


class EventFormatError(ValueError):
    """A file does not match its declared on-disk format."""


class UsageError(RuntimeError):
    """An API was called out of order (stale tape, wrong training stage)."""


def check_positive(name: str, value, strict: bool = True):
    if strict and not value > 0:
        raise ValidationError(f"{name} must be > 0, got {value!r}")
    if not strict and not value >= 0:
        raise ValidationError(f"{name} must be >= 0, got {value!r}")
    return value


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "inputs") -> None:
    if a.shape != b.shape:
        raise ValidationError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def check_grid_batch(X, n_channels: int | None = None, size: int | None = None) -> np.ndarray:
    """Coerce to a float64 ``(n, 2C, M, M)`` batch, accepting a single grid."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValidationError(f"expected grids of shape (n, 2C, W, H), got {X.shape}")
    if n_channels is not None and X.shape[1] != n_channels:
        raise ValidationError(f"expected {n_channels} channels, got {X.shape[1]}")
    if size is not None and X.shape[2:] != (size, size):
        raise ValidationError(f"expected {size}x{size} grids, got {X.shape[2]}x{X.shape[3]}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("grids contain NaN or Inf")
    return X
