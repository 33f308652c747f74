"""Config-driven orchestration shared by the command line and the end-to-end tests."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ._validation import ValidationError
from .autoencoder import StagedSparseAutoencoder, load_model, save_model
from .classifier import GestureClassifier
from .config import RunConfig
from .diffusion import ConditionalLatentDiffusion, fit_latent_sequence
from .events import EventStream, default_gesture_classes, format_for_path, read_events, synth_gesture, write_events
from .pipeline import GenerationPipeline, evaluate_generated
from .preprocess import FilterConfig, active_patch_filter

log = logging.getLogger(__name__)

__all__ = [
    "Dataset",
    "load_dataset",
    "synth_dataset",
    "write_dataset",
    "fit_autoencoder",
    "encode_streams",
    "fit_diffusion",
    "fit_classifier",
    "run_end_to_end",
]

CLASSES_FILE = "classes.json"


@dataclass
class Dataset:
    streams: list[EventStream]
    labels: np.ndarray
    class_names: list[str]


def synth_dataset(
    class_names: list[str],
    per_class: int,
    seed: int = 0,
    width: int = 32,
    height: int = 32,
    duration_us: int = 1_000_000,
    events_per_us: float = 0.0164,
    noise_rate: float = 0.0005,
    phase: float | None = None,
) -> Dataset:
    """Synthetic gestures, ``per_class`` per class, labeled by position in ``class_names``.

    ``phase`` fixes the starting angle of rotation gestures (radians); by
    default every stream draws its own.
    """
    known = {g.name: g if phase is None else replace(g, phase=float(phase)) for g in default_gesture_classes()}
    unknown = [n for n in class_names if n not in known]
    if unknown:
        raise LookupError(f"unknown gesture class(es) {unknown}; available: {sorted(known)}")
    streams, labels = [], []
    for i in range(per_class):
        for k, name in enumerate(class_names):
            s = synth_gesture(known[name], duration_us, width, height, events_per_us, noise_rate, seed * 1_000_003 + i * len(class_names) + k)
            streams.append(EventStream(s.width, s.height, s.events, k))
            labels.append(k)
    return Dataset(streams, np.array(labels, dtype=np.int64), list(class_names))


def write_dataset(ds: Dataset, directory, format: str = "binary") -> list[Path]:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    ext = "csv" if format == "csv" else "evs"
    paths = []
    for i, (s, y) in enumerate(zip(ds.streams, ds.labels)):
        path = out / f"{i:05d}_{ds.class_names[y]}.{ext}"
        write_events(s, path, format)
        paths.append(path)
    (out / CLASSES_FILE).write_text(json.dumps(ds.class_names) + "\n")
    return paths


def load_dataset(directory, class_names: list[str] | None = None, width: int | None = None, height: int | None = None) -> Dataset:
    """Every ``*.evs``/``*.csv`` file in ``directory`` (sorted by name), labeled from the EVS1 header.

    CSV files carry no label or geometry; their label is parsed from a
    ``_<class name>`` file-name suffix and ``width``/``height`` are required.
    """
    d = Path(directory)
    if not d.is_dir():
        raise ValidationError(f"{directory}: not a directory")
    names_file = d / CLASSES_FILE
    if names_file.exists():
        class_names = json.loads(names_file.read_text())
    streams, labels = [], []
    for path in sorted(p for p in d.iterdir() if p.suffix.lower() in (".evs", ".csv")):
        fmt = format_for_path(path)
        if fmt == "csv":
            if width is None or height is None:
                raise ValidationError(f"{path}: CSV input needs the sensor width and height")
            stem = path.stem.split("_", 1)[-1]
            label = class_names.index(stem) if class_names and stem in class_names else None
            s = read_events(path, "csv", width=width, height=height, label=label)
        else:
            s = read_events(path, "binary")
        if s.label is None or s.label < 0:
            raise ValidationError(f"{path}: stream has no label")
        streams.append(s)
        labels.append(s.label)
    if not streams:
        raise ValidationError(f"{directory}: no event files")
    if class_names is None:
        class_names = [str(i) for i in range(max(labels) + 1)]
    return Dataset(streams, np.array(labels, dtype=np.int64), list(class_names))


def _filter(cfg: RunConfig) -> FilterConfig | None:
    f = cfg.filter
    return FilterConfig(f.window_us, f.patch_px, f.threshold) if f.enabled else None


def filtered(cfg: RunConfig, streams: list[EventStream]) -> list[EventStream]:
    fc = _filter(cfg)
    return [active_patch_filter(s, fc) for s in streams] if fc else list(streams)


def fit_autoencoder(cfg: RunConfig, train: list[EventStream], val: list[EventStream] | None = None) -> StagedSparseAutoencoder:
    a, v, lo = cfg.autoencoder, cfg.voxel, cfg.loss
    est = StagedSparseAutoencoder(
        n_bins=v.n_bins, final_size=v.size, stage_events=tuple(a.stage_events), epochs_per_stage=a.epochs_per_stage,
        warmup_epochs=a.warmup_epochs, finetune_epochs=a.finetune_epochs, latent_dim=a.latent_dim, hidden_dim=a.hidden_dim,
        core_channels=a.core_channels, min_channels=a.min_channels, dropout=a.dropout, cap=v.cap, lr=a.lr,
        batch_size=a.batch_size, max_grids_per_stage=a.max_grids_per_stage, k_err=lo.k_err, k_subopt=lo.k_subopt,
        c_min=lo.c_min, act_threshold=lo.act_threshold, random_state=cfg.seed,
    )
    return est.fit(filtered(cfg, train), validation=filtered(cfg, val) if val else None)


def encode_streams(ae: StagedSparseAutoencoder, streams: list[EventStream], cfg: RunConfig) -> np.ndarray:
    """``(n, num_slices, latent_dim)``: per-stream latent sequences, zero-padded or truncated."""
    out = []
    for s in filtered(cfg, streams):
        grids = ae.grids([s], cfg.voxel.count)
        z = ae.transform(grids) if len(grids) else np.zeros((0, ae.latent_dim))
        out.append(fit_latent_sequence(z, cfg.diffusion.num_slices))
    return np.stack(out)


def fit_diffusion(cfg: RunConfig, latents: np.ndarray, labels, class_names: list[str]) -> ConditionalLatentDiffusion:
    d = cfg.diffusion
    est = ConditionalLatentDiffusion(
        T=d.T, schedule=d.schedule, hidden_dim=d.hidden_dim, embed_dim=d.embed_dim, time_dim=d.time_dim,
        guidance=d.guidance, n_iter=d.n_iter, batch_size=d.batch_size, lr=d.lr, class_names=list(class_names),
        embeddings=d.embeddings, random_state=cfg.seed,
    )
    return est.fit(latents, labels)


def fit_classifier(cfg: RunConfig, train: Dataset, val: Dataset | None = None) -> GestureClassifier:
    c, v, f, a = cfg.classifier, cfg.voxel, cfg.filter, cfg.autoencoder
    est = GestureClassifier(
        n_bins=v.n_bins, size=v.size, count=c.count, max_slices=c.max_slices, cap=v.cap,
        filter_window_us=f.window_us, filter_patch_px=f.patch_px, filter_threshold=f.threshold, use_filter=f.enabled,
        latent_dim=a.latent_dim, hidden_dim=a.hidden_dim, core_channels=a.core_channels, min_channels=a.min_channels,
        head_dim=c.head_dim, dropout=a.dropout, p_drop=c.p_drop, epochs=c.epochs, lr=c.lr, batch_size=c.batch_size,
        random_state=cfg.seed,
    )
    validation = (val.streams, val.labels) if val is not None else None
    return est.fit(train.streams, train.labels, validation=validation)


def make_pipeline(cfg: RunConfig, ae_model, dm: ConditionalLatentDiffusion) -> GenerationPipeline:
    return GenerationPipeline(ae_model, dm, cfg.generation.slice_us, cfg.diffusion.guidance, cfg.diffusion.steps)


def default_prompts(cfg: RunConfig, class_names: list[str]) -> dict[str, int]:
    return dict(cfg.evaluation.prompts) if cfg.evaluation.prompts else {n: i for i, n in enumerate(class_names)}


def run_end_to_end(cfg: RunConfig, train: Dataset, val: Dataset | None, workdir) -> dict:
    """Train autoencoder, diffusion model and classifier, save checkpoints, evaluate generations.

    Returns a JSON-ready summary; the checkpoints land in ``workdir`` as
    ``ae.evck``, ``dm.evck`` and ``cls.evck``.
    """
    work = Path(workdir)
    work.mkdir(parents=True, exist_ok=True)
    ae = fit_autoencoder(cfg, train.streams, val.streams if val else None)
    save_model(ae.model_, work / "ae.evck")
    latents = encode_streams(ae, train.streams, cfg)
    dm = fit_diffusion(cfg, latents, train.labels, train.class_names)
    dm.save(work / "dm.evck")
    cls = fit_classifier(cfg, train, val)
    cls.save(work / "cls.evck")
    # evaluate with the reloaded checkpoints so the run matches what the CLI would see
    ae_model, _ = load_model(work / "ae.evck")
    dm = ConditionalLatentDiffusion.load(work / "dm.evck")
    cls = GestureClassifier.load(work / "cls.evck")
    pipe = make_pipeline(cfg, ae_model, dm)
    reports = evaluate_generated(
        pipe, cls, default_prompts(cfg, train.class_names), cfg.generation.samples_per_prompt,
        list(cfg.generation.boost), cfg.seed, cfg.evaluation.groups or None,
    )
    summary = {
        "ae_val_f1": ae.reports_[-1].final_f1 if val else None,
        "classifier_val_accuracy": cls_val_accuracy(cls, val),
        "reports": [r.to_dict() for r in reports],
    }
    return summary


def cls_val_accuracy(cls: GestureClassifier, val: Dataset | None):
    return cls.score(val.streams, val.labels) if val is not None else None
