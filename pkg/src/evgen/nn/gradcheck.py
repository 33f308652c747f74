"""Central finite-difference checks of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from .tensor import Tape, Tensor

__all__ = ["GradCheckReport", "grad_check", "check_layer_kinds"]


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def _rel_err(a: np.ndarray, n: np.ndarray, floor: float = 1e-6) -> float:
    if a.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale))


def grad_check(
    network: L.Layer,
    x: np.ndarray,
    tolerance: float = 1e-4,
    eps: float = 1e-4,
    training: bool = False,
    seed: int = 0,
) -> GradCheckReport:
    """Compare tape gradients of a random projection of the output against finite differences.

    Covers the input and every unfrozen parameter. With ``training=True``
    every evaluation reuses ``seed`` so dropout masks stay fixed.
    """
    x = np.asarray(x, dtype=np.float64)
    params = [p for p in network.parameters() if not p.frozen]

    def run(xv):
        rng = np.random.default_rng(seed) if training else None
        return network(Tensor(xv), training, rng).data

    out0 = run(x)
    proj = np.random.default_rng(seed + 1).standard_normal(out0.shape)

    def objective(xv):
        return float(np.sum(run(xv) * proj))

    for p in params:
        p.zero_grad()
    xt = Tensor(x.copy(), requires_grad=True)
    rng = np.random.default_rng(seed) if training else None
    with Tape() as tape:
        out = network(xt, training, rng)
    tape.backward(out, proj)

    report = GradCheckReport(tolerance=tolerance)
    num = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        fp = objective(x)
        x[idx] = orig - eps
        fm = objective(x)
        x[idx] = orig
        num[idx] = (fp - fm) / (2 * eps)
    gx = xt.grad if xt.grad is not None else np.zeros_like(x)
    report.errors["input"] = _rel_err(gx, num)
    for p in params:
        num = np.zeros_like(p.data)
        for idx in np.ndindex(p.shape):
            orig = p.data[idx]
            p.data[idx] = orig + eps
            fp = objective(x)
            p.data[idx] = orig - eps
            fm = objective(x)
            p.data[idx] = orig
            num[idx] = (fp - fm) / (2 * eps)
        report.errors[p.name] = _rel_err(p.grad, num)
    return report


def check_layer_kinds(seed: int = 0, tolerance: float = 1e-4) -> dict[str, GradCheckReport]:
    """Finite-difference check of every layer kind on small random shapes."""
    rng = np.random.default_rng(seed)
    cases = {
        "dense": (L.Sequential([L.Dense(5, 4, rng)]), rng.standard_normal((3, 5)), False),
        "conv2d": (L.Sequential([L.Conv2d(2, 3, rng)]), rng.standard_normal((2, 2, 5, 6)), False),
        "maxpool2": (L.Sequential([L.MaxPool2()]), rng.permutation(2 * 2 * 4 * 6).reshape(2, 2, 4, 6) * 0.1, False),
        "upsample2": (L.Sequential([L.Upsample2()]), rng.standard_normal((2, 2, 3, 3)), False),
        "flatten": (L.Sequential([L.Flatten(), L.Dense(12, 3, rng)]), rng.standard_normal((2, 3, 2, 2)), False),
        "unflatten": (L.Sequential([L.Unflatten((2, 2, 2)), L.Conv2d(2, 1, rng)]), rng.standard_normal((2, 8)), False),
        "gelu": (L.Sequential([L.GELU()]), rng.standard_normal((4, 6)) * 2, False),
        "sigmoid": (L.Sequential([L.Sigmoid()]), rng.standard_normal((4, 6)) * 2, False),
        "dropout": (L.Sequential([L.Dense(6, 5, rng), L.Dropout(0.3)]), rng.standard_normal((4, 6)), True),
    }
    return {
        kind: grad_check(net, x, tolerance=tolerance, training=train, seed=seed)
        for kind, (net, x, train) in cases.items()
    }
