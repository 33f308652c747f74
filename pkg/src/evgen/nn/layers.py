"""Layer set and sequential networks built on the recording ops."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .._validation import ValidationError
from . import ops
from .tensor import Parameter, Tape, Tensor

__all__ = [
    "LayerSpec",
    "Layer",
    "Dense",
    "Conv2d",
    "MaxPool2",
    "Upsample2",
    "Flatten",
    "Unflatten",
    "GELU",
    "Sigmoid",
    "Dropout",
    "Sequential",
    "build_layer",
    "forward",
    "backward",
    "LAYER_KINDS",
]

LAYER_KINDS = ("dense", "conv2d", "maxpool2", "upsample2", "flatten", "unflatten", "gelu", "sigmoid", "dropout")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValidationError(f"unknown layer kind {self.kind!r}")


class Layer:
    kind = ""

    def parameters(self) -> list[Parameter]:
        return []

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return in_shape

    def __call__(self, x: Tensor, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        raise NotImplementedError


def _uniform(rng: np.random.Generator, bound: float, shape) -> np.ndarray:
    return rng.uniform(-bound, bound, size=shape)


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = "dense"):
        bound = 1.0 / math.sqrt(n_in)
        self.n_in, self.n_out = n_in, n_out
        self.weight = Parameter(_uniform(rng, bound, (n_in, n_out)), f"{name}.weight")
        self.bias = Parameter(_uniform(rng, bound, (n_out,)), f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def out_shape(self, in_shape):
        if in_shape[-1] != self.n_in:
            raise ValidationError(f"dense expects {self.n_in} features, got {in_shape[-1]}")
        return (*in_shape[:-1], self.n_out)

    def __call__(self, x, training=False, rng=None):
        self.out_shape(x.shape)
        return ops.linear(x, self.weight, self.bias)


class Conv2d(Layer):
    """3x3 (by default) stride-1 convolution with size-preserving zero padding."""

    kind = "conv2d"

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, kernel: int = 3, name: str = "conv"):
        if kernel % 2 != 1:
            raise ValidationError("kernel size must be odd")
        bound = 1.0 / math.sqrt(c_in * kernel * kernel)
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.weight = Parameter(_uniform(rng, bound, (c_out, c_in, kernel, kernel)), f"{name}.weight")
        self.bias = Parameter(_uniform(rng, bound, (c_out,)), f"{name}.bias")

    def parameters(self):
        return [self.weight, self.bias]

    def out_shape(self, in_shape):
        if len(in_shape) != 4 or in_shape[1] != self.c_in:
            raise ValidationError(f"conv2d expects (N, {self.c_in}, H, W), got {in_shape}")
        return (in_shape[0], self.c_out, in_shape[2], in_shape[3])

    def __call__(self, x, training=False, rng=None):
        self.out_shape(x.shape)
        return ops.conv2d(x, self.weight, self.bias, pad=self.kernel // 2)


class MaxPool2(Layer):
    kind = "maxpool2"

    def out_shape(self, in_shape):
        if len(in_shape) != 4 or in_shape[2] % 2 or in_shape[3] % 2:
            raise ValidationError(f"maxpool2 needs even spatial dims, got {in_shape}")
        return (in_shape[0], in_shape[1], in_shape[2] // 2, in_shape[3] // 2)

    def __call__(self, x, training=False, rng=None):
        self.out_shape(x.shape)
        return ops.maxpool2(x)


class Upsample2(Layer):
    """Nearest-neighbour x2 upsampling."""

    kind = "upsample2"

    def out_shape(self, in_shape):
        if len(in_shape) != 4:
            raise ValidationError(f"upsample2 expects a 4-D input, got {in_shape}")
        return (in_shape[0], in_shape[1], in_shape[2] * 2, in_shape[3] * 2)

    def __call__(self, x, training=False, rng=None):
        self.out_shape(x.shape)
        return ops.upsample2(x)


class Flatten(Layer):
    kind = "flatten"

    def out_shape(self, in_shape):
        return (in_shape[0], int(np.prod(in_shape[1:])))

    def __call__(self, x, training=False, rng=None):
        return ops.reshape(x, self.out_shape(x.shape))


class Unflatten(Layer):
    kind = "unflatten"

    def __init__(self, shape: tuple[int, ...]):
        self.shape = tuple(shape)

    def out_shape(self, in_shape):
        if len(in_shape) != 2 or in_shape[1] != int(np.prod(self.shape)):
            raise ValidationError(f"unflatten to {self.shape} got input {in_shape}")
        return (in_shape[0], *self.shape)

    def __call__(self, x, training=False, rng=None):
        return ops.reshape(x, self.out_shape(x.shape))


class GELU(Layer):
    """Exact (erf-based) GELU."""

    kind = "gelu"

    def __call__(self, x, training=False, rng=None):
        return ops.gelu(x)


class Sigmoid(Layer):
    kind = "sigmoid"

    def __call__(self, x, training=False, rng=None):
        return ops.sigmoid(x)


class Dropout(Layer):
    kind = "dropout"

    def __init__(self, p: float = 0.1):
        if not 0.0 <= p <= 1.0:
            raise ValidationError(f"dropout probability must be in [0, 1], got {p}")
        self.p = p

    def __call__(self, x, training=False, rng=None):
        if not training or self.p == 0.0:
            return x
        if rng is None:
            raise ValidationError("dropout in training mode needs a random generator")
        return ops.dropout(x, self.p, rng)


def build_layer(spec: LayerSpec, rng: np.random.Generator, name: str = "") -> Layer:
    p = spec.params
    if spec.kind == "dense":
        return Dense(p["n_in"], p["n_out"], rng, name=name or "dense")
    if spec.kind == "conv2d":
        return Conv2d(p["c_in"], p["c_out"], rng, kernel=p.get("kernel", 3), name=name or "conv")
    if spec.kind == "maxpool2":
        return MaxPool2()
    if spec.kind == "upsample2":
        return Upsample2()
    if spec.kind == "flatten":
        return Flatten()
    if spec.kind == "unflatten":
        return Unflatten(p["shape"])
    if spec.kind == "gelu":
        return GELU()
    if spec.kind == "sigmoid":
        return Sigmoid()
    return Dropout(p.get("p", 0.1))


class Sequential(Layer):
    """Ordered layer list; shape errors are re-raised with the layer index."""

    kind = "sequential"

    def __init__(self, layers: list[Layer] | None = None):
        self.layers = list(layers or [])

    @classmethod
    def from_specs(cls, specs: list[LayerSpec], rng: np.random.Generator, prefix: str = "") -> Sequential:
        return cls([build_layer(s, rng, name=f"{prefix}{i}.{s.kind}") for i, s in enumerate(specs)])

    def parameters(self):
        return [p for layer in self.layers for p in layer.parameters()]

    def out_shape(self, in_shape):
        shape = in_shape
        for i, layer in enumerate(self.layers):
            try:
                shape = layer.out_shape(shape)
            except ValidationError as exc:
                raise ValidationError(f"layer {i} ({layer.kind}): {exc}") from None
        return shape

    def __call__(self, x, training=False, rng=None):
        for i, layer in enumerate(self.layers):
            try:
                x = layer(x, training, rng)
            except ValidationError as exc:
                raise ValidationError(f"layer {i} ({layer.kind}): {exc}") from None
        return x


def forward(network: Layer, x, training: bool = False, seed: int | None = None) -> tuple[Tensor, Tape]:
    """Run ``network`` on ``x`` under a fresh tape; returns ``(output, tape)``."""
    rng = np.random.default_rng(seed) if training else None
    x = ops.as_tensor(x)
    with Tape() as tape:
        out = network(x, training, rng)
    return out, tape


def backward(tape: Tape, output: Tensor, grad) -> None:
    tape.backward(output, grad)
