"""EVCK checkpoint files.

Layout: ``b"EVCK"``, version (u32 LE), then one entry per tensor until EOF:
name length (u32 LE), UTF-8 name, rank (u32 LE), dims (u32 LE each),
frozen flag (u8), float32 LE values. Metadata travels as the reserved
entry ``__meta__``: a rank-1 tensor holding the bytes of a JSON document.
Optimizer moments use the names ``adamw.m/<param>`` and ``adamw.v/<param>``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .._validation import EventFormatError

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint", "META_KEY"]

_MAGIC = b"EVCK"
_VERSION = 1
META_KEY = "__meta__"


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    frozen: dict[str, bool] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def params(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if not k.startswith("adamw.")}

    def optimizer(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith("adamw.")}


def _entry(name: str, values: np.ndarray, frozen: bool) -> bytes:
    raw = name.encode("utf-8")
    values = np.asarray(values)
    parts = [struct.pack("<I", len(raw)), raw, struct.pack("<I", values.ndim)]
    parts.append(struct.pack(f"<{values.ndim}I", *values.shape))
    parts.append(struct.pack("<B", int(frozen)))
    parts.append(np.ascontiguousarray(values, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(path, params, meta: dict | None = None, optimizer=None) -> None:
    """Write ``params`` (iterable of :class:`Parameter`) plus optional metadata and optimizer state."""
    chunks = [_MAGIC, struct.pack("<I", _VERSION)]
    if meta is not None:
        blob = json.dumps(meta, sort_keys=True).encode("utf-8")
        chunks.append(_entry(META_KEY, np.frombuffer(blob, dtype=np.uint8).astype(np.float32), False))
    for p in params:
        chunks.append(_entry(p.name, p.data, p.frozen))
    if optimizer is not None:
        for name, arr in optimizer.state_arrays().items():
            chunks.append(_entry(name, arr, False))
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if raw[:4] != _MAGIC:
        raise EventFormatError(f"{path}: not an EVCK checkpoint")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != _VERSION:
        raise EventFormatError(f"{path}: unsupported checkpoint version {version}")
    pos = 8
    ck = Checkpoint()
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos : pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}I", raw, pos)
            pos += 4 * rank
            (flag,) = struct.unpack_from("<B", raw, pos)
            pos += 1
            count = int(np.prod(dims)) if rank else 1
            vals = np.frombuffer(raw, dtype="<f4", count=count, offset=pos).reshape(dims)
            pos += 4 * count
            if name == META_KEY:
                ck.meta = json.loads(vals.astype(np.uint8).tobytes().decode("utf-8"))
                continue
            ck.tensors[name] = vals.astype(np.float64)
            ck.frozen[name] = bool(flag)
    except (struct.error, ValueError) as exc:
        raise EventFormatError(f"{path}: corrupt checkpoint ({exc})") from None
    return ck


def restore_params(params, ck: Checkpoint, strict: bool = True) -> None:
    tensors = ck.params()
    for p in params:
        if p.name not in tensors:
            if strict:
                raise EventFormatError(f"checkpoint lacks parameter {p.name!r}")
            continue
        p.assign(tensors[p.name])
        p.frozen = ck.frozen[p.name]
