"""Spatio-temporal voxel grids: construction, probability maps and Bernoulli event sampling.

A voxel grid is a float64 array of shape ``(2C, W, H)`` indexed
``(channel, x, y)``. Channels ``0..C-1`` hold ON events per time bin and
``C..2C-1`` hold OFF events.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import EventFormatError, ValidationError
from .events import EVENT_DTYPE, EventStream
from .preprocess import EventSlice, FilterConfig, active_patch_filter, slice_by_count

__all__ = [
    "voxelize",
    "to_prob",
    "boost",
    "bernoulli_sample",
    "downsample_events",
    "write_grids",
    "read_grids",
    "EventVoxelizer",
    "PreprocessConfig",
    "slice_by_time",
    "stream_to_grids",
]

_GRID_MAGIC = b"EVG1"
_GRID_HEADER = struct.Struct("<4sIII")


def voxelize(slice_: EventSlice, n_bins: int, width: int, height: int) -> np.ndarray:
    ev = slice_.events
    grid = np.zeros((2 * n_bins, width, height), dtype=np.float64)
    if len(ev) == 0:
        return grid
    x = ev["x"].astype(np.int64)
    y = ev["y"].astype(np.int64)
    bad = np.flatnonzero((x >= width) | (y >= height))
    if len(bad):
        raise ValidationError(f"event {int(bad[0])} at ({x[bad[0]]}, {y[bad[0]]}) outside {width}x{height}")
    tbin = np.minimum(np.floor(np.asarray(slice_.normalized_t) * n_bins).astype(np.int64), n_bins - 1)
    chan = np.where(ev["p"] > 0, tbin, n_bins + tbin)
    np.add.at(grid, (chan, x, y), 1.0)
    return grid


def downsample_events(events: np.ndarray, width: int, height: int, size: int) -> np.ndarray:
    """Map sensor coordinates onto a ``size`` x ``size`` grid by integer scaling."""
    out = events.copy()
    out["x"] = (events["x"].astype(np.int64) * size) // width
    out["y"] = (events["y"].astype(np.int64) * size) // height
    return out


def to_prob(grid: np.ndarray, cap: float = 1.0) -> np.ndarray:
    if not cap > 0:
        raise ValidationError(f"cap must be > 0, got {cap}")
    return np.minimum(np.asarray(grid, dtype=np.float64) / cap, 1.0)


def boost(prob: np.ndarray, factor: float) -> np.ndarray:
    if not factor >= 1:
        raise ValidationError(f"boost factor must be >= 1, got {factor}")
    return np.minimum(np.asarray(prob, dtype=np.float64) * factor, 1.0)


def bernoulli_sample(prob: np.ndarray, t_start_us: int, t_end_us: int, seed: int) -> EventSlice:
    """Emit at most one event per voxel with the voxel's probability.

    Timestamps are uniform inside the voxel's time bin. Draws come from a
    Philox counter-based generator in a fixed voxel order, so the output
    depends only on ``seed``.
    """
    if not t_end_us > t_start_us:
        raise ValidationError("t_end_us must exceed t_start_us")
    prob = np.asarray(prob, dtype=np.float64)
    if prob.ndim != 3 or prob.shape[0] % 2:
        raise ValidationError(f"expected a (2C, W, H) probability grid, got {prob.shape}")
    n_bins = prob.shape[0] // 2
    rng = np.random.Generator(np.random.Philox(seed))
    emit = rng.random(prob.shape) < prob
    u_time = rng.random(prob.shape)
    c, x, y = np.nonzero(emit)
    span = (t_end_us - t_start_us) / n_bins
    tbin = c % n_bins
    t = np.floor(t_start_us + (tbin + u_time[c, x, y]) * span).astype(np.int64)
    t = np.clip(t, t_start_us, t_end_us)
    events = np.empty(len(c), dtype=EVENT_DTYPE)
    events["x"], events["y"], events["t"] = x, y, t
    events["p"] = np.where(c < n_bins, 1, -1)
    order = np.argsort(t, kind="stable")
    events = events[order]
    span_total = float(t_end_us - t_start_us)
    return EventSlice(events, int(t_start_us), int(t_end_us), (events["t"] - t_start_us) / span_total)


def write_grids(path, grids) -> None:
    """Write one or more grids as consecutive EVG1 records.

    Values are stored as float32 in ``(channel, y, x)`` row-major order.
    """
    if isinstance(grids, np.ndarray) and grids.ndim == 3:
        grids = [grids]
    with open(path, "wb") as fh:
        for g in grids:
            g = np.asarray(g)
            c2, w, h = g.shape
            fh.write(_GRID_HEADER.pack(_GRID_MAGIC, c2 // 2, w, h))
            fh.write(np.ascontiguousarray(g.transpose(0, 2, 1), dtype="<f4").tobytes())


def read_grids(path) -> list[np.ndarray]:
    raw = Path(path).read_bytes()
    grids, pos = [], 0
    while pos < len(raw):
        if len(raw) - pos < _GRID_HEADER.size:
            raise EventFormatError(f"{path}: truncated grid header at byte {pos}")
        magic, c, w, h = _GRID_HEADER.unpack_from(raw, pos)
        if magic != _GRID_MAGIC:
            raise EventFormatError(f"{path}: bad magic {magic!r} at byte {pos}")
        pos += _GRID_HEADER.size
        n = 2 * c * w * h
        if len(raw) - pos < 4 * n:
            raise EventFormatError(f"{path}: truncated grid payload")
        vals = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(2 * c, h, w)
        grids.append(vals.transpose(0, 2, 1).astype(np.float64))
        pos += 4 * n
    return grids


def stream_to_grids(stream: EventStream, count: int, n_bins: int, size: int, cap: float | None = None) -> np.ndarray:
    """Slice a stream by ``count`` and voxelize each slice at ``size`` x ``size``."""
    grids = []
    for sl in slice_by_count(stream, count):
        ev = downsample_events(sl.events, stream.width, stream.height, size)
        grids.append(voxelize(EventSlice(ev, sl.t_start, sl.t_end, sl.normalized_t), n_bins, size, size))
    out = np.stack(grids) if grids else np.zeros((0, 2 * n_bins, size, size))
    return to_prob(out, cap) if cap is not None else out


def slice_by_time(stream: EventStream, slice_us: int) -> list[EventSlice]:
    """Cut a stream into windows ``[k*slice_us, (k+1)*slice_us)`` anchored at t=0, skipping empty ones."""
    if slice_us < 1:
        raise ValidationError(f"slice duration must be >= 1 us, got {slice_us}")
    ev = stream.events
    if len(ev) == 0:
        return []
    win = ev["t"] // slice_us
    cuts = np.flatnonzero(np.diff(win)) + 1
    return [EventSlice.from_events(part) for part in np.split(ev, cuts)]


@dataclass(frozen=True)
class PreprocessConfig:
    """Stream to grid-stack recipe shared by the classifier and the evaluation harness.

    Slices are either fixed-count (``count`` events) or, when ``slice_us`` is
    set, fixed-duration. If a stream has no complete count slice its partial
    remainder is used instead. At most ``max_slices`` leading slices are kept.
    """

    filter: FilterConfig | None = FilterConfig()
    count: int = 2048
    slice_us: int | None = None
    n_bins: int = 1
    size: int = 32
    cap: float = 1.0
    max_slices: int = 8

    def __post_init__(self):
        if self.count < 1 or self.n_bins < 1 or self.size < 1 or self.max_slices < 1:
            raise ValidationError("count, n_bins, size and max_slices must be >= 1")

    def slices(self, stream: EventStream) -> list[EventSlice]:
        if self.filter is not None:
            stream = active_patch_filter(stream, self.filter)
        if self.slice_us is not None:
            out = slice_by_time(stream, self.slice_us)
        else:
            out = slice_by_count(stream, self.count) or slice_by_count(stream, self.count, keep_remainder=True)
        return out[: self.max_slices]

    def grids(self, stream: EventStream) -> np.ndarray:
        """``(k, 2C, size, size)`` probability grids; ``k == 0`` when nothing survives preprocessing."""
        out = []
        for sl in self.slices(stream):
            ev = downsample_events(sl.events, stream.width, stream.height, self.size)
            out.append(voxelize(EventSlice(ev, sl.t_start, sl.t_end, sl.normalized_t), self.n_bins, self.size, self.size))
        if not out:
            return np.zeros((0, 2 * self.n_bins, self.size, self.size))
        return to_prob(np.stack(out), self.cap)


class EventVoxelizer(TransformerMixin, BaseEstimator):
    """Turn event streams into stacked, capped voxel grids.

    ``transform`` returns a list with one ``(n_slices, 2C, size, size)``
    array per input stream.
    """

    def __init__(self, n_bins=1, count=2048, size=32, cap=1.0):
        self.n_bins = n_bins
        self.count = count
        self.size = size
        self.cap = cap

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        if isinstance(X, EventStream):
            X = [X]
        return [stream_to_grids(s, self.count, self.n_bins, self.size, self.cap) for s in X]
