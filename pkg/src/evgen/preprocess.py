"""Active-patch noise filtering and fixed-count slicing."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from ._validation import ValidationError, check_positive
from .events import EVENT_DTYPE, EventStream

__all__ = [
    "FilterConfig",
    "EventSlice",
    "active_patch_filter",
    "slice_by_count",
    "ActivePatchFilter",
]


@dataclass(frozen=True)
class FilterConfig:
    window_us: int = 20_000
    patch_px: int = 8
    threshold: int = 7

    def __post_init__(self):
        check_positive("window_us", self.window_us)
        check_positive("patch_px", self.patch_px)
        check_positive("threshold", self.threshold)


@dataclass(eq=False)
class EventSlice:
    events: np.ndarray
    t_start: int
    t_end: int
    normalized_t: np.ndarray

    def __len__(self) -> int:
        return len(self.events)

    @classmethod
    def from_events(cls, events: np.ndarray) -> EventSlice:
        if len(events) == 0:
            return cls(events, 0, 0, np.zeros(0))
        t = events["t"]
        t0, t1 = int(t[0]), int(t[-1])
        if t1 > t0:
            norm = (t - t0) / float(t1 - t0)
        else:
            norm = np.zeros(len(events))
        return cls(events, t0, t1, norm)


def active_patch_filter(stream: EventStream, cfg: FilterConfig) -> EventStream:
    """Drop every (time window, patch) bucket holding fewer than ``cfg.threshold`` events.

    Windows are anchored at the first event's timestamp. Edge patches that
    are cut by the sensor border use the same absolute threshold.
    """
    ev = stream.events
    if len(ev) == 0:
        return stream.with_events(ev.copy())
    window = (ev["t"] - ev["t"][0]) // cfg.window_us
    n_px = -(-stream.width // cfg.patch_px)
    n_py = -(-stream.height // cfg.patch_px)
    patch = (ev["x"].astype(np.int64) // cfg.patch_px) * n_py + ev["y"].astype(np.int64) // cfg.patch_px
    key = window * (n_px * n_py) + patch
    _, inverse, counts = np.unique(key, return_inverse=True, return_counts=True)
    keep = counts[inverse] >= cfg.threshold
    return stream.with_events(ev[keep])


def slice_by_count(stream: EventStream | np.ndarray, n: int, keep_remainder: bool = False) -> list[EventSlice]:
    if n < 1:
        raise ValidationError(f"slice size must be >= 1, got {n}")
    ev = stream.events if isinstance(stream, EventStream) else np.asarray(stream, dtype=EVENT_DTYPE)
    stop = len(ev) if keep_remainder else (len(ev) // n) * n
    return [EventSlice.from_events(ev[i : min(i + n, stop)]) for i in range(0, stop, n)]


class ActivePatchFilter(TransformerMixin, BaseEstimator):
    """Transformer form of :func:`active_patch_filter` over lists of streams.

    Defaults are a 20 ms window, 8 px patches and a 7-event threshold.
    """

    def __init__(self, window_us=20_000, patch_px=8, threshold=7):
        self.window_us = window_us
        self.patch_px = patch_px
        self.threshold = threshold

    def fit(self, X=None, y=None):
        self.config_ = FilterConfig(self.window_us, self.patch_px, self.threshold)
        return self

    def transform(self, X):
        cfg = FilterConfig(self.window_us, self.patch_px, self.threshold)
        if isinstance(X, EventStream):
            return active_patch_filter(X, cfg)
        return [active_patch_filter(s, cfg) for s in X]
