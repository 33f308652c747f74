"""AdamW with decoupled weight decay."""

from __future__ import annotations

import math

import numpy as np

from .tensor import Parameter

__all__ = ["AdamW", "adamw_step"]


class AdamW:
    def __init__(self, params, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-2):
        self.params: list[Parameter] = list(params)
        self.lr, self.beta1, self.beta2, self.eps, self.weight_decay = lr, beta1, beta2, eps, weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.frozen:
                continue
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            if self.weight_decay:
                p.data *= 1.0 - self.lr * self.weight_decay
            p.data -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.version += 1

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"adamw.step": np.array([float(self.t)])}
        for p, m, v in zip(self.params, self.m, self.v):
            out[f"adamw.m/{p.name}"] = m
            out[f"adamw.v/{p.name}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        if "adamw.step" not in arrays:
            return
        self.t = int(arrays["adamw.step"][0])
        for i, p in enumerate(self.params):
            if f"adamw.m/{p.name}" in arrays:
                self.m[i][...] = arrays[f"adamw.m/{p.name}"]
                self.v[i][...] = arrays[f"adamw.v/{p.name}"]


def adamw_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-2, *, state: AdamW | None = None) -> AdamW:
    """One AdamW update; pass the returned state back in to continue the run."""
    if state is None:
        state = AdamW(params, lr, beta1, beta2, eps, weight_decay)
    else:
        state.lr, state.beta1, state.beta2, state.eps, state.weight_decay = lr, beta1, beta2, eps, weight_decay
    state.step()
    return state


def clip_grad_norm(params, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if not p.frozen))
    if total > max_norm > 0:
        scale = max_norm / total
        for p in params:
            if not p.frozen:
                p.grad *= scale
    return total
