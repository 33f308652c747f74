"""Differentiable numpy kernels. Each op returns a Tensor and records its backward rule."""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf, expit

from .tensor import Tensor, record

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def add(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data + b.data)

    def back(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None, _unbroadcast(g, b.shape) if needs[1] else None)

    return record(out, (a, b), back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = Tensor(a.data * b.data)

    def back(g, needs):
        return (
            _unbroadcast(g * b.data, a.shape) if needs[0] else None,
            _unbroadcast(g * a.data, b.shape) if needs[1] else None,
        )

    return record(out, (a, b), back)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def linear(x: Tensor, w: Tensor, b: Tensor | None) -> Tensor:
    """``x @ w + b`` for ``x`` of shape (N, in) and ``w`` of shape (in, out)."""
    out = Tensor(x.data @ w.data + (b.data if b is not None else 0.0))

    def back(g, needs):
        gx = g @ w.data.T if needs[0] else None
        gw = x.data.T @ g if needs[1] else None
        gb = g.sum(axis=0) if b is not None and needs[2] else None
        return gx, gw, gb

    inputs = (x, w, b) if b is not None else (x, w)
    return record(out, inputs, back)


def _columns(x: np.ndarray, k: int, pad: int) -> np.ndarray:
    """Shifted copies of ``x`` laid out as (k*k*Cin, N*Ho*Wo) for a single matmul."""
    n, c, h, w = x.shape
    xt = x.transpose(1, 0, 2, 3)
    if pad:
        xt = np.pad(xt, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    ho, wo = h + 2 * pad - k + 1, w + 2 * pad - k + 1
    cols = np.empty((k, k, c, n, ho, wo))
    for i in range(k):
        for j in range(k):
            cols[i, j] = xt[:, :, i : i + ho, j : j + wo]
    return cols.reshape(k * k * c, n * ho * wo), ho, wo


def _conv_forward(x: np.ndarray, w: np.ndarray, pad: int, cols=None) -> np.ndarray:
    cout, cin, k, _ = w.shape
    if cols is None:
        cols, ho, wo = _columns(x, k, pad)
    else:
        cols, ho, wo = cols
    y = w.transpose(0, 2, 3, 1).reshape(cout, -1) @ cols
    return y.reshape(cout, x.shape[0], ho, wo).transpose(1, 0, 2, 3)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None, pad: int = 1) -> Tensor:
    """Stride-1 cross-correlation with symmetric zero padding.

    ``x``: (N, Cin, H, W); ``w``: (Cout, Cin, k, k).
    """
    k = w.shape[-1]
    cols = _columns(x.data, k, pad)
    y = _conv_forward(x.data, w.data, pad, cols)
    if b is not None:
        y = y + b.data[None, :, None, None]
    out = Tensor(y)

    def back(g, needs):
        gx = gw = gb = None
        if needs[0]:
            w_flip = w.data[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
            gx = _conv_forward(g, w_flip, k - 1 - pad)
        if needs[1]:
            gmat = g.transpose(1, 0, 2, 3).reshape(g.shape[1], -1)
            gw = (gmat @ cols[0].T).reshape(w.shape[0], k, k, w.shape[1]).transpose(0, 3, 1, 2)
        if b is not None and needs[2]:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    inputs = (x, w, b) if b is not None else (x, w)
    return record(out, inputs, back)


def maxpool2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    idx = blocks.argmax(axis=-1)
    out = Tensor(np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0])

    def back(g, needs):
        gb = np.zeros((n, c, h // 2, w // 2, 4))
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gx = gb.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h, w)
        return (gx,)

    return record(out, (x,), back)


def upsample2(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    out = Tensor(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))

    def back(g, needs):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return record(out, (x,), back)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = x.shape
    out = Tensor(x.data.reshape(shape))
    return record(out, (x,), lambda g, needs: (g.reshape(src),))


def gelu(x: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(x.data * _INV_SQRT2))
    out = Tensor(x.data * cdf)

    def back(g, needs):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x.data * x.data)
        return (g * (cdf + x.data * pdf),)

    return record(out, (x,), back)


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data)
    out = Tensor(s)
    return record(out, (x,), lambda g, needs: (g * s * (1.0 - s),))


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: surviving units are scaled by ``1/(1-p)``."""
    if p <= 0.0:
        return x
    if p >= 1.0:
        mask = np.zeros(x.shape)
    else:
        mask = (rng.random(x.shape) >= p) / (1.0 - p)
    out = Tensor(x.data * mask)
    return record(out, (x,), lambda g, needs: (g * mask,))


def concat(tensors: list[Tensor], axis: int = -1) -> Tensor:
    axis = axis % tensors[0].data.ndim
    sizes = [t.shape[axis] for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis))

    def back(g, needs):
        parts = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(p if need else None for p, need in zip(parts, needs))

    return record(out, tuple(tensors), back)


def mean(x: Tensor, axis: int) -> Tensor:
    n = x.shape[axis]
    out = Tensor(x.data.mean(axis=axis))

    def back(g, needs):
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape) / n,)

    return record(out, (x,), back)


def max_(x: Tensor, axis: int) -> Tensor:
    idx = x.data.argmax(axis=axis)
    out = Tensor(np.take_along_axis(x.data, np.expand_dims(idx, axis), axis=axis).squeeze(axis))

    def back(g, needs):
        gx = np.zeros(x.shape)
        np.put_along_axis(gx, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis=axis)
        return (gx,)

    return record(out, (x,), back)


def take_rows(table: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows ``table[idx]``; gradients scatter-add back into the table."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(table.data[idx])

    def back(g, needs):
        gt = np.zeros(table.shape)
        np.add.at(gt, idx, g)
        return (gt,)

    return record(out, (table,), back)


def segment_max_mean(x: Tensor, lengths) -> Tensor:
    """Per-segment max and mean over consecutive rows of ``x`` (N, F) -> (B, 2F)."""
    lengths = np.asarray(lengths, dtype=np.int64)
    if np.any(lengths < 1) or lengths.sum() != x.shape[0]:
        raise ValueError("segment lengths must be positive and cover every row")
    starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
    mx = np.maximum.reduceat(x.data, starts, axis=0)
    mn = np.add.reduceat(x.data, starts, axis=0) / lengths[:, None]
    seg = np.repeat(np.arange(len(lengths)), lengths)
    # first row attaining the maximum in each segment
    hit = x.data == mx[seg]
    first = np.zeros_like(hit)
    for b, (s, n) in enumerate(zip(starts, lengths)):
        blk = hit[s : s + n]
        first[s + blk.argmax(axis=0), np.arange(x.shape[1])] = True
    out = Tensor(np.concatenate([mx, mn], axis=1))
    f = x.shape[1]

    def back(g, needs):
        gmax, gmean = g[:, :f], g[:, f:]
        return (first * gmax[seg] + gmean[seg] / lengths[seg, None],)

    return record(out, (x,), back)
