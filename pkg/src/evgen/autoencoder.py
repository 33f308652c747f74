"""Staged sparse autoencoder over voxel grids.

Training grows the network from the inside out. Stage 1 trains a dense core
at 8x8 between an input and an output adapter. Every later stage doubles the
grid side, freezes everything that already exists, discards the old adapters
and adds one conv+pool encoder block, one conv+upsample decoder block and a
fresh pair of adapters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import UsageError, ValidationError, check_grid_batch
from .events import EventStream
from .losses import LossConfig, batch_f1, batch_loss_and_grad
from .nn import (
    GELU,
    AdamW,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    MaxPool2,
    Parameter,
    Sequential,
    Sigmoid,
    Tape,
    Tensor,
    Unflatten,
    Upsample2,
    load_checkpoint,
    no_tape,
    restore_params,
    save_checkpoint,
)
from .voxel import stream_to_grids

log = logging.getLogger(__name__)

__all__ = [
    "AEConfig",
    "StageConfig",
    "StagedAutoencoder",
    "TrainingReport",
    "warmup_region",
    "apply_warmup",
    "build_stage",
    "train_stage",
    "finetune",
    "stage_schedule",
    "StagedSparseAutoencoder",
]

BASE_SIZE = 8


@dataclass(frozen=True)
class AEConfig:
    n_bins: int = 1
    final_size: int = 32
    latent_dim: int = 64
    hidden_dim: int = 256
    core_channels: int = 16
    min_channels: int = 4
    dropout: float = 0.1

    def channels(self, size: int) -> int:
        """Doubling channel ladder: ``core_channels`` at 8x8, halving per doubling of the side."""
        halvings = int(round(math.log2(size / BASE_SIZE)))
        return max(self.core_channels >> halvings, self.min_channels)

    @property
    def n_stages(self) -> int:
        return int(round(math.log2(self.final_size / BASE_SIZE))) + 1


@dataclass(frozen=True)
class StageConfig:
    index: int
    size: int
    final_size: int
    max_events: int
    epochs: int = 100
    warmup_epochs: int = 6
    latent_dim: int = 64

    def __post_init__(self):
        if self.index < 1:
            raise ValidationError("stage index is 1-based")
        if self.size != min(BASE_SIZE * 2 ** (self.index - 1), self.final_size):
            raise ValidationError(f"stage {self.index} must run at {BASE_SIZE * 2 ** (self.index - 1)}px, got {self.size}")
        if self.size > self.final_size:
            raise ValidationError("stage resolution exceeds the final resolution")


def stage_schedule(final_size: int, max_events, epochs: int = 100, warmup_epochs: int = 6, latent_dim: int = 64) -> list[StageConfig]:
    n = int(round(math.log2(final_size / BASE_SIZE))) + 1
    if BASE_SIZE * 2 ** (n - 1) != final_size:
        raise ValidationError(f"final size {final_size} is not 8 * 2^k")
    if isinstance(max_events, int):
        max_events = [max_events] * n
    if len(max_events) != n:
        raise ValidationError(f"need {n} max-event values, got {len(max_events)}")
    if any(b < a for a, b in zip(max_events, max_events[1:])):
        raise ValidationError("max_events schedule must be nondecreasing")
    return [
        StageConfig(i + 1, BASE_SIZE * 2**i, final_size, int(max_events[i]), epochs, warmup_epochs, latent_dim)
        for i in range(n)
    ]


def warmup_region(epoch: int, size: int, final_size: int) -> tuple[int, int] | None:
    """Half-open index range ``[z, size - z)`` filled during warm-up epoch ``epoch``; ``None`` once empty."""
    if epoch < 1:
        raise ValidationError("epochs are 1-based")
    z = max((8 * size) // final_size, 1) * (epoch - 1)
    if z >= size - z:
        return None
    return z, size - z


def apply_warmup(batch: np.ndarray, epoch: int, size: int, final_size: int, warmup_epochs: int) -> np.ndarray:
    """Fill the warm-up square of every grid with the batch-wide maximum."""
    if epoch > warmup_epochs:
        return batch
    region = warmup_region(epoch, size, final_size)
    if region is None:
        return batch
    lo, hi = region
    out = np.array(batch, dtype=np.float64, copy=True)
    out[..., lo:hi, lo:hi] = out.max() if out.size else 0.0
    return out


class StagedAutoencoder:
    """Encoder blocks, dense core and decoder blocks for the current stage."""

    def __init__(self, config: AEConfig, rng: np.random.Generator):
        c = config
        self.config = c
        self.stage = 1
        self.size = BASE_SIZE
        ch0 = c.channels(BASE_SIZE)
        flat = ch0 * BASE_SIZE * BASE_SIZE
        self.core_enc = Sequential([
            Flatten(),
            Dense(flat, c.hidden_dim, rng, name="core.dense0"),
            GELU(),
            Dropout(c.dropout),
            Dense(c.hidden_dim, c.latent_dim, rng, name="core.dense1"),
        ])
        self.core_dec = Sequential([
            GELU(),
            Dropout(c.dropout),
            Dense(c.latent_dim, flat, rng, name="core.dense2"),
            GELU(),
            Unflatten((ch0, BASE_SIZE, BASE_SIZE)),
        ])
        self.enc_blocks: list[Sequential] = []  # innermost first
        self.dec_blocks: list[Sequential] = []  # innermost first
        # per-channel (mean, std) of the input adapter output, recorded after a stage is trained
        self.feed_stats: tuple[np.ndarray, np.ndarray] | None = None
        self._new_adapters(rng)

    def _new_adapters(self, rng: np.random.Generator) -> None:
        c2 = 2 * self.config.n_bins
        ch = self.config.channels(self.size)
        s = self.stage
        self.in_adapter = Sequential([Conv2d(c2, ch, rng, name=f"adapter{s}.in"), GELU()])
        self.out_adapter = Sequential([Conv2d(ch, c2, rng, name=f"adapter{s}.out"), Sigmoid()])

    def grow(self, rng: np.random.Generator) -> None:
        for p in self.parameters():
            p.frozen = True
        self.stage += 1
        self.size *= 2
        inner = self.config.channels(self.size // 2)
        outer = self.config.channels(self.size)
        s = self.stage
        self.enc_blocks.append(Sequential([Conv2d(outer, inner, rng, name=f"enc{s}.conv"), GELU(), MaxPool2()]))
        self.dec_blocks.append(Sequential([Conv2d(inner, outer, rng, name=f"dec{s}.conv"), GELU(), Upsample2()]))
        self._new_adapters(rng)

    def parameters(self) -> list[Parameter]:
        params = self.in_adapter.parameters()
        for blk in reversed(self.enc_blocks):
            params += blk.parameters()
        params += self.core_enc.parameters() + self.core_dec.parameters()
        for blk in self.dec_blocks:
            params += blk.parameters()
        return params + self.out_adapter.parameters()

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if not p.frozen]

    def encode(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        n_ch = 2 * self.config.n_bins
        if x.data.ndim != 4 or x.shape[1] != n_ch or x.shape[2:] != (self.size, self.size):
            raise ValidationError(f"stage {self.stage} expects (N, {n_ch}, {self.size}, {self.size}) grids, got {x.shape}")
        h = self.in_adapter(x, training, rng)
        for blk in reversed(self.enc_blocks):
            h = blk(h, training, rng)
        return self.core_enc(h, training, rng)

    def decode(self, z: Tensor, training: bool = False, rng=None) -> Tensor:
        if z.data.ndim != 2 or z.shape[1] != self.config.latent_dim:
            raise ValidationError(f"expected latents of shape (N, {self.config.latent_dim}), got {z.shape}")
        h = self.core_dec(z, training, rng)
        for blk in self.dec_blocks:
            h = blk(h, training, rng)
        return self.out_adapter(h, training, rng)

    def __call__(self, x: Tensor, training: bool = False, rng=None) -> Tensor:
        return self.decode(self.encode(x, training, rng), training, rng)

    def record_feed_stats(self, grids: np.ndarray) -> None:
        with no_tape():
            h = self.in_adapter(Tensor(grids)).data
        self.feed_stats = (h.mean(axis=(0, 2, 3)), h.std(axis=(0, 2, 3)))

    def calibrate_new_block(self, grids: np.ndarray, iterations: int = 10) -> None:
        """Rescale the newest encoder block so the frozen inner blocks see inputs
        with the per-channel mean/std their own adapter used to produce."""
        if not self.enc_blocks or self.feed_stats is None:
            return
        target_mean, target_std = self.feed_stats
        conv = self.enc_blocks[-1].layers[0]
        with no_tape():
            for _ in range(iterations):
                h = self.enc_blocks[-1](self.in_adapter(Tensor(grids))).data
                std = h.std(axis=(0, 2, 3))
                ratio = np.where(std > 1e-8, target_std / np.maximum(std, 1e-8), 1.0)
                conv.weight.data *= ratio[:, None, None, None]
                conv.bias.data *= ratio
                h = self.enc_blocks[-1](self.in_adapter(Tensor(grids))).data
                conv.bias.data += target_mean - h.mean(axis=(0, 2, 3))
        conv.weight.version += 1
        conv.bias.version += 1

    def reconstruct(self, grids: np.ndarray, batch_size: int = 256) -> np.ndarray:
        with no_tape():
            return np.concatenate([self(Tensor(grids[i : i + batch_size])).data for i in range(0, len(grids), batch_size)])


def build_stage(stage: StageConfig, prev: StagedAutoencoder | None = None, config: AEConfig | None = None, seed: int = 0) -> StagedAutoencoder:
    """Stage 1 creates a fresh model; stage ``s > 1`` grows ``prev`` (in place) by one block pair."""
    rng = np.random.default_rng([seed, stage.index])
    if stage.index == 1:
        if config is None:
            config = AEConfig(final_size=stage.final_size, latent_dim=stage.latent_dim)
        return StagedAutoencoder(config, rng)
    if prev is None:
        raise ValidationError(f"stage {stage.index} needs the stage {stage.index - 1} model")
    if prev.stage != stage.index - 1:
        raise ValidationError(f"cannot build stage {stage.index} on top of stage {prev.stage}")
    prev.grow(rng)
    if prev.size != stage.size:
        raise ValidationError(f"shape chain broken: model at {prev.size}px, stage wants {stage.size}px")
    return prev


@dataclass
class TrainingReport:
    stage: int
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    val_f1: list[float] = field(default_factory=list)

    @property
    def final_f1(self) -> float:
        return self.val_f1[-1] if self.val_f1 else float("nan")


def evaluate(model: StagedAutoencoder, grids: np.ndarray, loss: LossConfig) -> tuple[float, float]:
    recon = model.reconstruct(grids)
    value, _ = batch_loss_and_grad(grids, recon, loss)
    return value, batch_f1(grids, recon, loss.act_threshold)


def _fit_epochs(model, train, val, epochs, warmup, loss, seed, lr, batch_size, report, weight_decay=1e-2, on_warmup_end=None):
    if len(train) == 0:
        raise ValidationError("empty training dataset")
    params = model.trainable_parameters()
    opt = AdamW(params, lr=lr, weight_decay=weight_decay)
    rng = np.random.default_rng(seed)
    size, final = model.size, model.config.final_size
    for epoch in range(1, epochs + 1):
        order = rng.permutation(len(train))
        total, seen = 0.0, 0
        for i in range(0, len(order), batch_size):
            batch = train[order[i : i + batch_size]]
            if warmup:
                batch = apply_warmup(batch, epoch, size, final, warmup)
            opt.zero_grad()
            with Tape() as tape:
                recon = model(Tensor(batch), True, rng)
            value, grad = batch_loss_and_grad(batch, recon.data, loss)
            tape.backward(recon, grad)
            opt.step()
            total += value * len(batch)
            seen += len(batch)
        report.epochs.append(epoch)
        report.train_loss.append(total / seen)
        if val is not None and len(val):
            vl, vf = evaluate(model, val, loss)
            report.val_loss.append(vl)
            report.val_f1.append(vf)
        if on_warmup_end and warmup and epoch <= warmup and (epoch == warmup or warmup_region(epoch + 1, size, final) is None):
            on_warmup_end()
            on_warmup_end = None
    return report


def train_stage(
    model: StagedAutoencoder,
    train: np.ndarray,
    stage: StageConfig,
    loss: LossConfig = LossConfig(),
    seed: int = 0,
    val: np.ndarray | None = None,
    lr: float = 1e-3,
    batch_size: int = 16,
) -> TrainingReport:
    if model.stage != stage.index:
        raise UsageError(f"model is at stage {model.stage}, asked to train stage {stage.index}")
    train = check_grid_batch(train, 2 * model.config.n_bins, stage.size)
    if val is not None:
        val = check_grid_batch(val, 2 * model.config.n_bins, stage.size)
    report = TrainingReport(stage.index)
    # the max-filled warm-up inputs drag the new block's output statistics away from
    # what the frozen inner blocks expect, so calibrate again once warm-up is over
    recalibrate = lambda: model.calibrate_new_block(train[:64])
    recalibrate()
    _fit_epochs(model, train, val, stage.epochs, stage.warmup_epochs, loss, seed, lr, batch_size, report, on_warmup_end=recalibrate)
    model.record_feed_stats(train[:64])
    return report


def finetune(
    model: StagedAutoencoder,
    train: np.ndarray,
    epochs: int,
    loss: LossConfig = LossConfig(),
    seed: int = 0,
    val: np.ndarray | None = None,
    lr: float = 1e-3,
    batch_size: int = 16,
) -> TrainingReport:
    if model.size != model.config.final_size:
        raise UsageError(f"fine-tuning needs the final {model.config.final_size}px stage, model is at {model.size}px")
    for p in model.parameters():
        p.frozen = False
    report = TrainingReport(model.stage)
    if epochs == 0:
        return report
    train = check_grid_batch(train, 2 * model.config.n_bins, model.size)
    return _fit_epochs(model, train, val, epochs, 0, loss, seed, lr, batch_size, report)


def save_model(model: StagedAutoencoder, path, extra: dict | None = None) -> None:
    meta = {"kind": "autoencoder", "stage": model.stage, "config": asdict(model.config)}
    if extra:
        meta.update(extra)
    save_checkpoint(path, model.parameters(), meta)


def load_model(path) -> tuple[StagedAutoencoder, dict]:
    ck = load_checkpoint(path)
    if ck.meta.get("kind") != "autoencoder":
        raise ValidationError(f"{path}: not an autoencoder checkpoint")
    cfg = AEConfig(**ck.meta["config"])
    model = StagedAutoencoder(cfg, np.random.default_rng(0))
    while model.stage < ck.meta["stage"]:
        model.grow(np.random.default_rng(0))
    restore_params(model.parameters(), ck)
    return model, ck.meta


def _stage_grids(streams, count, n_bins, size, cap, limit, rng):
    grids = [stream_to_grids(s, count, n_bins, size, cap) for s in streams]
    grids = np.concatenate(grids) if grids else np.zeros((0, 2 * n_bins, size, size))
    if limit and len(grids) > limit:
        grids = grids[np.sort(rng.choice(len(grids), limit, replace=False))]
    return grids


class StagedSparseAutoencoder(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` on event streams, ``transform`` grids to latents.

    ``stage_events`` is the per-stage slice size (events per grid), one value
    per stage from 8x8 up to ``final_size``.
    """

    def __init__(
        self,
        n_bins=1,
        final_size=32,
        stage_events=(128, 512, 2048),
        epochs_per_stage=60,
        warmup_epochs=6,
        finetune_epochs=0,
        latent_dim=64,
        hidden_dim=256,
        core_channels=16,
        min_channels=4,
        dropout=0.1,
        cap=1.0,
        lr=1e-3,
        batch_size=16,
        max_grids_per_stage=512,
        k_err=1e2,
        k_subopt=1e-3,
        c_min=0.1,
        act_threshold=0.5,
        random_state=0,
    ):
        self.n_bins = n_bins
        self.final_size = final_size
        self.stage_events = stage_events
        self.epochs_per_stage = epochs_per_stage
        self.warmup_epochs = warmup_epochs
        self.finetune_epochs = finetune_epochs
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.core_channels = core_channels
        self.min_channels = min_channels
        self.dropout = dropout
        self.cap = cap
        self.lr = lr
        self.batch_size = batch_size
        self.max_grids_per_stage = max_grids_per_stage
        self.k_err = k_err
        self.k_subopt = k_subopt
        self.c_min = c_min
        self.act_threshold = act_threshold
        self.random_state = random_state

    def _loss(self) -> LossConfig:
        return LossConfig(self.k_err, self.k_subopt, self.c_min, self.act_threshold)

    def _ae_config(self) -> AEConfig:
        return AEConfig(self.n_bins, self.final_size, self.latent_dim, self.hidden_dim, self.core_channels, self.min_channels, self.dropout)

    def fit(self, X: list[EventStream], y=None, validation: list[EventStream] | None = None):
        seed = int(self.random_state)
        stages = stage_schedule(self.final_size, list(self.stage_events), self.epochs_per_stage, self.warmup_epochs, self.latent_dim)
        loss = self._loss()
        rng = np.random.default_rng([seed, 999])
        model = None
        self.reports_ = []
        for st in stages:
            model = build_stage(st, model, self._ae_config(), seed)
            train = _stage_grids(X, st.max_events, self.n_bins, st.size, self.cap, self.max_grids_per_stage, rng)
            val = _stage_grids(validation, st.max_events, self.n_bins, st.size, self.cap, 0, rng) if validation else None
            log.info("stage %d: %d grids at %dpx, %d events each", st.index, len(train), st.size, st.max_events)
            self.reports_.append(train_stage(model, train, st, loss, seed + st.index, val, self.lr, self.batch_size))
        if self.finetune_epochs:
            st = stages[-1]
            train = _stage_grids(X, st.max_events, self.n_bins, st.size, self.cap, self.max_grids_per_stage, rng)
            val = _stage_grids(validation, st.max_events, self.n_bins, st.size, self.cap, 0, rng) if validation else None
            self.reports_.append(finetune(model, train, self.finetune_epochs, loss, seed + 100, val, self.lr, self.batch_size))
        self.model_ = model
        return self

    @classmethod
    def from_model(cls, model: StagedAutoencoder, **params) -> StagedSparseAutoencoder:
        c = model.config
        est = cls(n_bins=c.n_bins, final_size=c.final_size, latent_dim=c.latent_dim, hidden_dim=c.hidden_dim,
                  core_channels=c.core_channels, min_channels=c.min_channels, dropout=c.dropout, **params)
        est.model_ = model
        return est

    def grids(self, streams, count: int | None = None) -> np.ndarray:
        """Voxelize ``streams`` at the final resolution, ``count`` events per grid."""
        count = count or list(self.stage_events)[-1]
        return _stage_grids(streams, count, self.n_bins, self.final_size, self.cap, 0, None)

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_grid_batch(X, 2 * self.n_bins, self.model_.size)
        with no_tape():
            return self.model_.encode(Tensor(X)).data

    def inverse_transform(self, Z) -> np.ndarray:
        check_is_fitted(self, "model_")
        Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
        with no_tape():
            return self.model_.decode(Tensor(Z)).data

    def reconstruct(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.model_.reconstruct(check_grid_batch(X, 2 * self.n_bins, self.model_.size))

    def score(self, X, y=None) -> float:
        """Non-zero F1 of the reconstruction of grids ``X``."""
        X = check_grid_batch(X, 2 * self.n_bins, self.model_.size)
        return batch_f1(X, self.reconstruct(X), self.act_threshold)
