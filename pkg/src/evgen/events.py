"""Event-stream data model, the EVS1/CSV file formats and a synthetic gesture generator."""

from __future__ import annotations

import csv
import io
import math
import struct
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.stats import poisson

from ._validation import EventFormatError, ValidationError

__all__ = [
    "EVENT_DTYPE",
    "Event",
    "EventStream",
    "GestureClass",
    "read_events",
    "write_events",
    "synth_gesture",
    "default_gesture_classes",
]

# Packed little-endian record: u16 x, u16 y, i64 t, i8 p -> 13 bytes.
EVENT_DTYPE = np.dtype([("x", "<u2"), ("y", "<u2"), ("t", "<i8"), ("p", "i1")])
assert EVENT_DTYPE.itemsize == 13

_MAGIC = b"EVS1"
_HEADER = struct.Struct("<4sHHQi")


class Event(NamedTuple):
    x: int
    y: int
    t: int
    p: int


def _as_event_array(events) -> np.ndarray:
    if isinstance(events, np.ndarray) and events.dtype == EVENT_DTYPE:
        return events
    if isinstance(events, np.ndarray) and events.dtype.names:
        out = np.empty(len(events), dtype=EVENT_DTYPE)
        for name in EVENT_DTYPE.names:
            out[name] = events[name]
        return out
    rows = list(events)
    out = np.empty(len(rows), dtype=EVENT_DTYPE)
    if rows:
        arr = np.asarray(rows, dtype=np.int64).reshape(len(rows), 4)
        out["x"], out["y"], out["t"], out["p"] = arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3]
    return out


@dataclass(eq=False)
class EventStream:
    """Time-ordered polarity events on a ``width`` x ``height`` sensor.

    Events are held in a packed structured array (see ``EVENT_DTYPE``) so
    that vectorized preprocessing never has to touch Python objects.
    """

    width: int
    height: int
    events: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=EVENT_DTYPE))
    label: int | None = None

    def __post_init__(self):
        self.events = _as_event_array(self.events)
        self.validate()

    def validate(self) -> None:
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"zero-area geometry {self.width}x{self.height}")
        if self.width > 0xFFFF or self.height > 0xFFFF:
            raise ValidationError("geometry exceeds 16-bit range")
        ev = self.events
        if len(ev) == 0:
            return
        bad = np.flatnonzero(
            (ev["x"] >= self.width) | (ev["y"] >= self.height) | (ev["t"] < 0) | (np.abs(ev["p"]) != 1)
        )
        if len(bad):
            i = int(bad[0])
            raise ValidationError(f"event record {i} {tuple(ev[i].tolist())} invalid for {self.width}x{self.height}")
        if np.any(np.diff(ev["t"]) < 0):
            raise ValidationError("events are not sorted by timestamp")

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        for rec in self.events.tolist():
            yield Event(*rec)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.width == other.width
            and self.height == other.height
            and self.label == other.label
            and self.events.tobytes() == other.events.tobytes()
        )

    @property
    def x(self) -> np.ndarray:
        return self.events["x"]

    @property
    def y(self) -> np.ndarray:
        return self.events["y"]

    @property
    def t(self) -> np.ndarray:
        return self.events["t"]

    @property
    def p(self) -> np.ndarray:
        return self.events["p"]

    def with_events(self, events: np.ndarray) -> EventStream:
        return EventStream(self.width, self.height, events, self.label)


def _sorted_with_warning(events: np.ndarray, path) -> np.ndarray:
    if len(events) > 1 and np.any(np.diff(events["t"]) < 0):
        warnings.warn(f"{path}: events not sorted by time, re-sorting", stacklevel=3)
        events = events[np.argsort(events["t"], kind="stable")]
    return events


def _check_records(events: np.ndarray, width: int, height: int) -> None:
    bad = np.flatnonzero((events["x"] >= width) | (events["y"] >= height))
    if len(bad):
        i = int(bad[0])
        raise ValidationError(f"record {i}: coordinate ({events['x'][i]}, {events['y'][i]}) outside {width}x{height}")
    bad = np.flatnonzero(np.abs(events["p"]) != 1)
    if len(bad):
        raise ValidationError(f"record {int(bad[0])}: polarity {events['p'][bad[0]]} not in {{+1, -1}}")
    bad = np.flatnonzero(events["t"] < 0)
    if len(bad):
        raise ValidationError(f"record {int(bad[0])}: negative timestamp")


def read_events(path, format: str = "binary", *, width=None, height=None, label=None) -> EventStream:
    """Load an event file.

    ``width``/``height``/``label`` only apply to CSV files, which carry no
    geometry; when omitted the geometry is the bounding box of the events.
    """
    path = Path(path)
    if format == "binary":
        raw = path.read_bytes()
        if len(raw) < _HEADER.size:
            raise EventFormatError(f"{path}: truncated header")
        magic, w, h, count, lab = _HEADER.unpack_from(raw)
        if magic != _MAGIC:
            raise EventFormatError(f"{path}: bad magic {magic!r}")
        body = raw[_HEADER.size:]
        if len(body) != count * EVENT_DTYPE.itemsize:
            raise EventFormatError(f"{path}: header declares {count} records, found {len(body)} bytes")
        events = np.frombuffer(body, dtype=EVENT_DTYPE).copy()
        _check_records(events, w, h)
        events = _sorted_with_warning(events, path)
        return EventStream(w, h, events, None if lab == -1 else lab)
    if format == "csv":
        text = path.read_text()
        reader = csv.reader(io.StringIO(text))
        header = next(reader, None)
        if header is None or [c.strip() for c in header] != ["x", "y", "t", "p"]:
            raise EventFormatError(f"{path}: expected header 'x,y,t,p', got {header!r}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 4:
                raise EventFormatError(f"{path}:{lineno}: expected 4 fields")
            try:
                rows.append(tuple(int(v) for v in row))
            except ValueError as exc:
                raise EventFormatError(f"{path}:{lineno}: {exc}") from None
        events = _as_event_array(rows) if rows else np.empty(0, dtype=EVENT_DTYPE)
        if rows:
            arr = np.asarray(rows, dtype=np.int64)
            if arr[:, :2].min() < 0:
                raise ValidationError(f"record {int(np.flatnonzero(arr[:, :2].min(axis=1) < 0)[0])}: negative coordinate")
        w = width if width is not None else (int(events["x"].max()) + 1 if rows else 1)
        h = height if height is not None else (int(events["y"].max()) + 1 if rows else 1)
        _check_records(events, w, h)
        events = _sorted_with_warning(events, path)
        return EventStream(w, h, events, label)
    raise ValueError(f"unknown event format {format!r}")


def write_events(stream: EventStream, path, format: str = "binary") -> None:
    stream.validate()
    path = Path(path)
    if format == "binary":
        label = -1 if stream.label is None else int(stream.label)
        header = _HEADER.pack(_MAGIC, stream.width, stream.height, len(stream.events), label)
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(stream.events.astype(EVENT_DTYPE, copy=False).tobytes())
    elif format == "csv":
        with open(path, "w", newline="") as fh:
            fh.write("x,y,t,p\n")
            for x, y, t, p in stream.events.tolist():
                fh.write(f"{x},{y},{t},{p}\n")
    else:
        raise ValueError(f"unknown event format {format!r}")


def format_for_path(path) -> str:
    return "csv" if str(path).lower().endswith(".csv") else "binary"


@dataclass(frozen=True)
class GestureClass:
    """A parametric motion of a bright disc across the sensor.

    ``kind="rotation"``: the disc orbits ``center`` (fractions of the sensor
    size) at ``radius`` (fraction of the smaller side) with
    ``angular_velocity`` in rad/s; positive is counter-clockwise in image
    coordinates (y pointing down), so clockwise variants negate it.
    ``kind="translation"``: the disc starts at ``center`` and moves with
    ``velocity`` (fractions of sensor size per second).
    """

    id: int
    name: str
    kind: str = "rotation"
    center: tuple[float, float] = (0.5, 0.5)
    radius: float = 0.3
    angular_velocity: float = 2 * math.pi
    velocity: tuple[float, float] = (0.0, 0.0)
    disc_radius: float = 0.12
    phase: float | None = None

    def position(self, t_s: np.ndarray, width: int, height: int, phase: float):
        """Disc center and velocity (pixels, pixels/s) at times ``t_s`` in seconds."""
        cx, cy = self.center[0] * width, self.center[1] * height
        if self.kind == "rotation":
            r = self.radius * min(width, height)
            ang = phase + self.angular_velocity * t_s
            # image y axis points down: counter-clockwise on screen means decreasing y for increasing angle
            px = cx + r * np.cos(ang)
            py = cy - r * np.sin(ang)
            vx = -r * self.angular_velocity * np.sin(ang)
            vy = -r * self.angular_velocity * np.cos(ang)
        elif self.kind == "translation":
            px = cx + self.velocity[0] * width * t_s
            py = cy + self.velocity[1] * height * t_s
            vx = np.full_like(t_s, self.velocity[0] * width)
            vy = np.full_like(t_s, self.velocity[1] * height)
        else:
            raise ValidationError(f"unknown motion kind {self.kind!r}")
        return px, py, vx, vy


def default_gesture_classes() -> list[GestureClass]:
    return [
        GestureClass(0, "clockwise", angular_velocity=-2 * math.pi),
        GestureClass(1, "counter-clockwise", angular_velocity=2 * math.pi),
        GestureClass(2, "move-left", kind="translation", center=(0.85, 0.5), velocity=(-0.7, 0.0)),
        GestureClass(3, "move-right", kind="translation", center=(0.15, 0.5), velocity=(0.7, 0.0)),
    ]


def _poisson_count(rng: np.random.Generator, mean: float) -> int:
    # inverse-CDF draw keeps counts monotone in ``mean`` for a fixed seed
    if mean <= 0:
        return 0
    return int(poisson.ppf(rng.random(), mean))


def synth_gesture(
    gesture: GestureClass,
    duration_us: int,
    width: int,
    height: int,
    events_per_us: float,
    noise_rate: float,
    seed: int,
) -> EventStream:
    """Render a labeled synthetic gesture as an event stream.

    Edge events sit on the disc boundary, ON where the boundary moves
    forward and OFF where it trails, with the boundary normal drawn with
    density proportional to ``|cos|`` of its angle to the motion. Background
    noise is uniform in space, time and polarity at ``noise_rate`` events/us.
    Every random attribute has its own child stream, so raising a rate only
    appends events and never perturbs the ones already drawn.
    """
    if width <= 0 or height <= 0:
        raise ValidationError(f"zero-area geometry {width}x{height}")
    if duration_us <= 0:
        raise ValidationError("duration_us must be positive")
    if events_per_us < 0 or noise_rate < 0:
        raise ValidationError("rates must be non-negative")
    streams = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(10)]
    (r_count, r_time, r_angle, r_side, r_jit, r_phase, r_ncount, r_nt, r_nxy, r_np) = streams

    phase = gesture.phase if gesture.phase is not None else float(r_phase.uniform(0, 2 * math.pi))
    n_edge = _poisson_count(r_count, events_per_us * duration_us)
    t_edge = np.floor(r_time.random(n_edge) * duration_us).astype(np.int64)
    px, py, vx, vy = gesture.position(t_edge / 1e6, width, height, phase)
    heading = np.arctan2(vy, vx)
    alpha = np.arcsin(2.0 * r_angle.random(n_edge) - 1.0)
    trailing = r_side.random(n_edge) < 0.5
    normal = heading + alpha + np.where(trailing, math.pi, 0.0)
    rad = gesture.disc_radius * min(width, height) + r_jit.normal(0.0, 0.5, n_edge)
    ex = np.rint(px + rad * np.cos(normal)).astype(np.int64)
    ey = np.rint(py + rad * np.sin(normal)).astype(np.int64)
    ep = np.where(trailing, -1, 1).astype(np.int8)
    inside = (ex >= 0) & (ex < width) & (ey >= 0) & (ey < height)

    n_noise = _poisson_count(r_ncount, noise_rate * duration_us)
    t_noise = np.floor(r_nt.random(n_noise) * duration_us).astype(np.int64)
    nxy = r_nxy.random((n_noise, 2))
    nx = np.minimum((nxy[:, 0] * width).astype(np.int64), width - 1)
    ny = np.minimum((nxy[:, 1] * height).astype(np.int64), height - 1)
    npol = np.where(r_np.random(n_noise) < 0.5, 1, -1).astype(np.int8)

    events = np.empty(int(inside.sum()) + n_noise, dtype=EVENT_DTYPE)
    k = int(inside.sum())
    events["x"][:k], events["y"][:k] = ex[inside], ey[inside]
    events["t"][:k], events["p"][:k] = t_edge[inside], ep[inside]
    events["x"][k:], events["y"][k:], events["t"][k:], events["p"][k:] = nx, ny, t_noise, npol
    events = events[np.argsort(events["t"], kind="stable")]
    return EventStream(width, height, events, gesture.id)
