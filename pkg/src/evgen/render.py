"""Binary PGM/PPM renderings of event streams and voxel grids."""

from __future__ import annotations

import logging

import numpy as np

from .events import EventStream
from .preprocess import slice_by_count

log = logging.getLogger(__name__)

__all__ = ["accumulate_on", "accumulate_grids", "spacetime_image", "write_pgm", "write_ppm", "read_pnm"]


def write_pgm(path, image: np.ndarray) -> None:
    """P5 grayscale; values are written verbatim, 2 bytes big-endian when the maximum exceeds 255."""
    image = np.asarray(image)
    img = np.clip(np.rint(image), 0, 65535).astype(np.int64)
    maxval = max(int(img.max()) if img.size else 0, 1)
    h, w = img.shape
    header = f"P5\n{w} {h}\n{maxval}\n".encode("ascii")
    body = img.astype(">u2" if maxval > 255 else "u1").tobytes()
    with open(path, "wb") as fh:
        fh.write(header + body)


def write_ppm(path, image: np.ndarray) -> None:
    """P6 colour, 8 bits per channel; ``image`` is (H, W, 3) in [0, 255]."""
    img = np.clip(np.rint(np.asarray(image)), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes())


def read_pnm(path) -> np.ndarray:
    """Parse the P5/P6 files written here (no comments in the header)."""
    raw = open(path, "rb").read()
    parts, pos = [], 0
    while len(parts) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not raw[end : end + 1].isspace():
            end += 1
        parts.append(raw[pos:end].decode("ascii"))
        pos = end
    pos += 1
    magic, w, h, maxval = parts[0], int(parts[1]), int(parts[2]), int(parts[3])
    dtype = ">u2" if maxval > 255 else "u1"
    if magic == "P5":
        return np.frombuffer(raw, dtype=dtype, count=w * h, offset=pos).reshape(h, w).astype(np.int64)
    return np.frombuffer(raw, dtype="u1", count=w * h * 3, offset=pos).reshape(h, w, 3).astype(np.int64)


def accumulate_on(stream: EventStream, count: int, n_grids: int) -> np.ndarray:
    """Per-pixel ON-event totals over the first ``n_grids`` slices of ``count`` events, as an (H, W) image.

    A trailing partial slice is included when it falls inside the first
    ``n_grids``.
    """
    img = np.zeros((stream.height, stream.width), dtype=np.int64)
    for sl in slice_by_count(stream, count, keep_remainder=True)[:n_grids]:
        on = sl.events[sl.events["p"] > 0]
        np.add.at(img, (on["y"].astype(np.int64), on["x"].astype(np.int64)), 1)
    if not img.any():
        log.warning("no ON events to render; writing a blank image")
    return img


def accumulate_grids(grids: list[np.ndarray], n_grids: int) -> np.ndarray:
    """Sum of the ON channels of the first ``n_grids`` grids, as an (H, W) image."""
    if not grids:
        log.warning("no grids to render; writing a blank image")
        return np.zeros((1, 1))
    total = np.zeros(grids[0].shape[1:])
    for g in grids[:n_grids]:
        total += g[: g.shape[0] // 2].sum(axis=0)
    return total.T


def _ramp(stops: np.ndarray, u: np.ndarray) -> np.ndarray:
    pos = u * (len(stops) - 1)
    i = np.minimum(pos.astype(np.int64), len(stops) - 2)
    frac = (pos - i)[:, None]
    return stops[i] * (1 - frac) + stops[i + 1] * frac


_WARM = np.array([[96, 0, 0], [220, 60, 0], [255, 220, 40]], dtype=np.float64)
_COOL = np.array([[0, 0, 96], [0, 110, 220], [60, 230, 255]], dtype=np.float64)


def spacetime_image(stream: EventStream, steps: int = 16) -> np.ndarray:
    """(H, W, 3) image: ON events on a warm ramp and OFF events on a cool ramp by time, later events on top.

    The time span is cut into ``steps`` equal bins and the mean event
    position of each bin is drawn in white.
    """
    img = np.zeros((stream.height, stream.width, 3))
    ev = stream.events
    if len(ev) == 0:
        log.warning("empty stream; writing a blank image")
        return img
    t = ev["t"].astype(np.float64)
    span = t[-1] - t[0]
    u = (t - t[0]) / span if span > 0 else np.zeros(len(t))
    on = ev["p"] > 0
    colours = np.where(on[:, None], _ramp(_WARM, u), _ramp(_COOL, u))
    img[ev["y"].astype(np.int64), ev["x"].astype(np.int64)] = colours  # later writes win: events are time-sorted
    step = np.minimum((u * steps).astype(np.int64), steps - 1)
    for k in np.unique(step):
        sel = step == k
        mx = int(np.clip(np.rint(ev["x"][sel].mean()), 0, stream.width - 1))
        my = int(np.clip(np.rint(ev["y"][sel].mean()), 0, stream.height - 1))
        img[my, mx] = 255.0
    return img
