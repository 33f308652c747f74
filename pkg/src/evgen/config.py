"""Run configuration: a nested JSON document with a closed schema.

Every section is a dataclass; loading rejects keys that are not fields, so
a typo fails loudly instead of silently falling back to a default.
"""

from __future__ import annotations

import json
import os
from dataclasses import MISSING, asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from ._validation import ValidationError

__all__ = ["RunConfig", "load_config", "config_from_dict", "thread_limit"]


@dataclass
class DataSection:
    train: str | None = None
    val: str | None = None


@dataclass
class FilterSection:
    enabled: bool = True
    window_us: int = 20_000
    patch_px: int = 8
    threshold: int = 7


@dataclass
class VoxelSection:
    n_bins: int = 1
    size: int = 32
    cap: float = 1.0
    count: int = 2048


@dataclass
class AutoencoderSection:
    stage_events: list = field(default_factory=lambda: [128, 512, 2048])
    epochs_per_stage: int = 60
    warmup_epochs: int = 6
    finetune_epochs: int = 0
    latent_dim: int = 64
    hidden_dim: int = 256
    core_channels: int = 16
    min_channels: int = 4
    dropout: float = 0.1
    lr: float = 1e-3
    batch_size: int = 16
    max_grids_per_stage: int = 512


@dataclass
class LossSection:
    k_err: float = 1e2
    k_subopt: float = 1e-3
    c_min: float = 0.1
    act_threshold: float = 0.5


@dataclass
class DiffusionSection:
    T: int = 200
    schedule: str = "cosine"
    guidance: float = 7.5
    steps: int | None = None
    num_slices: int = 8
    hidden_dim: int = 256
    embed_dim: int = 32
    time_dim: int = 32
    n_iter: int = 3000
    batch_size: int = 32
    lr: float = 1e-3
    embeddings: str | None = None


@dataclass
class ClassifierSection:
    count: int = 2048
    max_slices: int = 8
    head_dim: int = 64
    p_drop: float = 0.2
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 8


@dataclass
class GenerationSection:
    slice_us: int = 125_000
    boost: list = field(default_factory=lambda: [1.0, 3.0])
    samples_per_prompt: int = 20


@dataclass
class EvaluationSection:
    prompts: dict = field(default_factory=dict)
    groups: dict = field(default_factory=dict)


@dataclass
class RunConfig:
    seed: int = 0
    class_names: list = field(default_factory=lambda: ["clockwise", "counter-clockwise"])
    data: DataSection = field(default_factory=DataSection)
    filter: FilterSection = field(default_factory=FilterSection)
    voxel: VoxelSection = field(default_factory=VoxelSection)
    autoencoder: AutoencoderSection = field(default_factory=AutoencoderSection)
    loss: LossSection = field(default_factory=LossSection)
    diffusion: DiffusionSection = field(default_factory=DiffusionSection)
    classifier: ClassifierSection = field(default_factory=ClassifierSection)
    generation: GenerationSection = field(default_factory=GenerationSection)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def to_dict(self) -> dict:
        return asdict(self)


_SCALARS = {"int": (int,), "float": (int, float), "bool": (bool,), "str": (str,), "list": (list,), "dict": (dict,)}


def _check_value(where: str, annotation: str, value):
    if value is None:
        if "None" not in annotation:
            raise ValidationError(f"{where}: null is not allowed")
        return value
    base = annotation.replace(" | None", "")
    allowed = _SCALARS.get(base)
    if allowed is None:
        return value
    if isinstance(value, bool) and base != "bool":
        raise ValidationError(f"{where}: expected {base}, got a boolean")
    if not isinstance(value, allowed):
        raise ValidationError(f"{where}: expected {base}, got {type(value).__name__}")
    return float(value) if base == "float" else value


def _build(cls, doc, where: str):
    if not isinstance(doc, dict):
        raise ValidationError(f"{where or 'config'}: expected an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(doc) - set(known))
    if unknown:
        prefix = f"{where}." if where else ""
        raise ValidationError(f"unknown config key(s): {', '.join(prefix + k for k in unknown)}")
    kwargs = {}
    for name, value in doc.items():
        f = known[name]
        path = f"{where}.{name}" if where else name
        default = f.default_factory() if f.default_factory is not MISSING else f.default
        if is_dataclass(default):
            kwargs[name] = _build(type(default), value, path)
        else:
            kwargs[name] = _check_value(path, str(f.type), value)
    return cls(**kwargs)


def config_from_dict(doc: dict, base_dir: str | os.PathLike | None = None) -> RunConfig:
    """Validate ``doc`` against the schema; relative data paths resolve against ``base_dir``."""
    cfg = _build(RunConfig, doc, "")
    base = Path(base_dir) if base_dir is not None else Path.cwd()
    for section, key in (("data", "train"), ("data", "val"), ("diffusion", "embeddings")):
        sec = getattr(cfg, section)
        value = getattr(sec, key)
        if value is None:
            continue
        path = Path(value)
        if not path.is_absolute():
            path = base / path
        if not path.exists():
            raise ValidationError(f"{section}.{key}: path {value!r} does not exist")
        setattr(sec, key, str(path))
    if cfg.diffusion.schedule not in ("linear", "cosine"):
        raise ValidationError(f"diffusion.schedule must be 'linear' or 'cosine', got {cfg.diffusion.schedule!r}")
    if len(cfg.class_names) < 1 or len(set(cfg.class_names)) != len(cfg.class_names):
        raise ValidationError("class_names must be a non-empty list of distinct names")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    return config_from_dict(doc, path.parent)


def thread_limit() -> int | None:
    """Worker cap from ``EVGEN_THREADS``; ``None`` when unset."""
    raw = os.environ.get("EVGEN_THREADS")
    if raw is None or raw == "":
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ValidationError(f"EVGEN_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValidationError(f"EVGEN_THREADS must be a positive integer, got {raw!r}")
    return n
