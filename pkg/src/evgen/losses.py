"""Sparse-population-regularized reconstruction loss and the non-zero F1 score.

All functions take voxel grids shaped ``(2C, W, H)``; the batched helper
:func:`batch_loss_and_grad` takes ``(N, 2C, W, H)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ._validation import ValidationError, check_same_shape

__all__ = [
    "LossConfig",
    "mse_channelwise",
    "sparsity_scale",
    "channel_weights",
    "total_loss",
    "f1_nonzero",
    "batch_loss_and_grad",
    "batch_f1",
]


@dataclass(frozen=True)
class LossConfig:
    k_err: float = 1e2
    k_subopt: float = 1e-3
    c_min: float = 0.1
    act_threshold: float = 0.5

    def __post_init__(self):
        if not self.k_err > 0 or not self.k_subopt > 0:
            raise ValidationError("k_err and k_subopt must be positive")
        if not 0 < self.c_min <= 1:
            raise ValidationError("c_min must lie in (0, 1]")
        if not 0 < self.act_threshold < 1:
            raise ValidationError("act_threshold must lie in (0, 1)")


def _pair(X, Xhat):
    X = np.asarray(X, dtype=np.float64)
    Xhat = np.asarray(Xhat, dtype=np.float64)
    check_same_shape(X, Xhat, "ground truth vs reconstruction")
    return X, Xhat


def mse_channelwise(X, Xhat) -> np.ndarray:
    X, Xhat = _pair(X, Xhat)
    d = X - Xhat
    return (d * d).mean(axis=(-2, -1))


def sparsity_distance(X, Xhat, act_threshold: float = 0.5) -> np.ndarray:
    """Per channel: reconstructed active voxels minus ground-truth non-zero voxels."""
    X, Xhat = _pair(X, Xhat)
    return (Xhat > act_threshold).sum(axis=(-2, -1)) - (X > 0).sum(axis=(-2, -1))


def sparsity_scale(X, Xhat, cfg: LossConfig = LossConfig()) -> np.ndarray:
    distance = sparsity_distance(X, Xhat, cfg.act_threshold).astype(np.float64)
    step = cfg.k_err * np.sign(distance - 1.0) + 1.0
    return 1.0 + cfg.k_subopt * step * distance


def channel_weights(X, cfg: LossConfig = LossConfig()) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    sums = X.sum(axis=(-2, -1))
    total = sums.sum(axis=-1, keepdims=True)
    safe = np.where(total > 0, total, 1.0)
    reverse = 1.0 - sums / safe
    return np.where(total > 0, np.maximum(cfg.c_min, reverse), 1.0)


def total_loss(X, Xhat, cfg: LossConfig = LossConfig()) -> float:
    return float(np.sum(mse_channelwise(X, Xhat) * sparsity_scale(X, Xhat, cfg) * channel_weights(X, cfg), axis=-1))


def f1_nonzero(X, Xhat, act_threshold: float = 0.5) -> float:
    X, Xhat = _pair(X, Xhat)
    truth = X > 0
    pred = Xhat > act_threshold
    tp = int(np.sum(truth & pred))
    fp = int(np.sum(~truth & pred))
    fn = int(np.sum(truth & ~pred))
    denom = 2 * tp + fp + fn
    return 1.0 if denom == 0 else 2 * tp / denom


def batch_f1(X, Xhat, act_threshold: float = 0.5) -> float:
    """F1 over the pooled confusion counts of a whole batch."""
    return f1_nonzero(X, Xhat, act_threshold)


def batch_loss_and_grad(X, Xhat, cfg: LossConfig = LossConfig()) -> tuple[float, np.ndarray]:
    """Mean per-sample loss over a batch and its gradient with respect to ``Xhat``.

    The sparsity scale and channel weights act as constant multipliers of
    the channel-wise MSE gradient.
    """
    X, Xhat = _pair(X, Xhat)
    if X.ndim != 4:
        raise ValidationError(f"expected a (N, 2C, W, H) batch, got {X.shape}")
    n, _, w, h = X.shape
    mult = sparsity_scale(X, Xhat, cfg) * channel_weights(X, cfg)  # (N, 2C)
    per_sample = np.sum(mse_channelwise(X, Xhat) * mult, axis=1)
    grad = (2.0 / (w * h * n)) * (Xhat - X) * mult[:, :, None, None]
    return float(per_sample.mean()), grad
