"""Slice-sequence gesture classifier.

Every slice of a stream is voxelized and encoded by a convolutional encoder
with the autoencoder's topology. The per-slice codes are pooled over the
slice axis (max and mean per feature), concatenated, and mapped to class
logits by three dense layers.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import ValidationError
from .autoencoder import BASE_SIZE, AEConfig
from .events import EventStream
from .nn import (
    GELU,
    AdamW,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    MaxPool2,
    Sequential,
    Tape,
    Tensor,
    load_checkpoint,
    no_tape,
    restore_params,
    save_checkpoint,
)
from .nn.ops import segment_max_mean
from .preprocess import FilterConfig, active_patch_filter
from .voxel import PreprocessConfig

log = logging.getLogger(__name__)

__all__ = ["Prediction", "SliceClassifier", "GestureClassifier", "classify", "softmax_cross_entropy", "drop_events"]


class Prediction(NamedTuple):
    label: int | None  # None when nothing survives preprocessing
    logits: np.ndarray

    @property
    def classifiable(self) -> bool:
        return self.label is not None


def softmax_cross_entropy(logits: np.ndarray, targets: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross entropy and its gradient with respect to ``logits``."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(targets)
    loss = -float(logp[np.arange(n), targets].mean())
    grad = np.exp(logp)
    grad[np.arange(n), targets] -= 1.0
    return loss, grad / n


def drop_events(stream: EventStream, p_drop: float, rng: np.random.Generator) -> EventStream:
    """Remove each event independently with probability ``p_drop``."""
    if p_drop <= 0:
        return stream
    keep = rng.random(len(stream.events)) >= p_drop
    return stream.with_events(stream.events[keep])


class SliceClassifier:
    """Per-slice encoder, temporal max/mean pooling and a dense head."""

    def __init__(self, ae: AEConfig, n_classes: int, head_dim: int, rng: np.random.Generator):
        self.ae = ae
        self.n_classes = n_classes
        self.head_dim = head_dim
        size = ae.final_size
        layers = [Conv2d(2 * ae.n_bins, ae.channels(size), rng, name="cls.in"), GELU()]
        while size > BASE_SIZE:
            layers += [Conv2d(ae.channels(size), ae.channels(size // 2), rng, name=f"cls.enc{size}"), GELU(), MaxPool2()]
            size //= 2
        layers += [
            Flatten(),
            Dense(ae.channels(BASE_SIZE) * BASE_SIZE * BASE_SIZE, ae.hidden_dim, rng, name="cls.core0"),
            GELU(),
            Dropout(ae.dropout),
            Dense(ae.hidden_dim, ae.latent_dim, rng, name="cls.core1"),
        ]
        self.encoder = Sequential(layers)
        self.head = Sequential([
            Dense(2 * ae.latent_dim, head_dim, rng, name="cls.head0"),
            GELU(),
            Dense(head_dim, head_dim, rng, name="cls.head1"),
            GELU(),
            Dense(head_dim, n_classes, rng, name="cls.head2"),
        ])

    def parameters(self):
        return self.encoder.parameters() + self.head.parameters()

    def __call__(self, grids: np.ndarray, lengths, training: bool = False, rng=None) -> Tensor:
        codes = self.encoder(Tensor(grids), training, rng)
        return self.head(segment_max_mean(codes, lengths), training, rng)


def _stack(grid_lists: list[np.ndarray], n_ch: int, size: int) -> tuple[np.ndarray, np.ndarray]:
    """Concatenate per-stream grid stacks; an empty stack becomes one zero grid."""
    parts = [g if len(g) else np.zeros((1, n_ch, size, size)) for g in grid_lists]
    return np.concatenate(parts), np.array([len(g) for g in parts])


@dataclass
class ClassifierReport:
    epochs: list[int] = field(default_factory=list)
    train_loss: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    val_accuracy: list[float] = field(default_factory=list)


class GestureClassifier(ClassifierMixin, BaseEstimator):
    """Estimator over labeled event streams.

    Streams are filtered once, then every epoch each training stream loses
    events at rate ``p_drop`` before slicing, so the augmentation differs
    between epochs. Results depend only on ``random_state``.
    """

    def __init__(
        self,
        n_bins=1,
        size=32,
        count=2048,
        max_slices=8,
        cap=1.0,
        filter_window_us=20_000,
        filter_patch_px=8,
        filter_threshold=7,
        use_filter=True,
        latent_dim=64,
        hidden_dim=256,
        core_channels=16,
        min_channels=4,
        head_dim=64,
        dropout=0.1,
        p_drop=0.2,
        epochs=30,
        lr=1e-3,
        batch_size=8,
        random_state=0,
    ):
        self.n_bins = n_bins
        self.size = size
        self.count = count
        self.max_slices = max_slices
        self.cap = cap
        self.filter_window_us = filter_window_us
        self.filter_patch_px = filter_patch_px
        self.filter_threshold = filter_threshold
        self.use_filter = use_filter
        self.latent_dim = latent_dim
        self.hidden_dim = hidden_dim
        self.core_channels = core_channels
        self.min_channels = min_channels
        self.head_dim = head_dim
        self.dropout = dropout
        self.p_drop = p_drop
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def _filter(self) -> FilterConfig | None:
        if not self.use_filter:
            return None
        return FilterConfig(self.filter_window_us, self.filter_patch_px, self.filter_threshold)

    def preprocessing(self, filtered: bool = True) -> PreprocessConfig:
        """The recipe applied at inference; ``filtered=False`` skips the noise filter."""
        return PreprocessConfig(self._filter() if filtered else None, self.count, None, self.n_bins, self.size, self.cap, self.max_slices)

    def _ae_config(self) -> AEConfig:
        return AEConfig(self.n_bins, self.size, self.latent_dim, self.hidden_dim, self.core_channels, self.min_channels, self.dropout)

    def _check_size(self):
        if self.size < BASE_SIZE or 2 ** round(math.log2(self.size / BASE_SIZE)) * BASE_SIZE != self.size:
            raise ValidationError(f"size must be 8 * 2^k, got {self.size}")

    def fit(self, X: list[EventStream], y, validation: tuple[list[EventStream], list] | None = None):
        self._check_size()
        y = np.asarray(y)
        if len(X) != len(y):
            raise ValidationError(f"{len(X)} streams but {len(y)} labels")
        self.classes_ = np.unique(y)
        if len(self.classes_) < 2:
            raise ValidationError(f"need at least 2 classes, got {len(self.classes_)}")
        if not 0 <= self.p_drop <= 1:
            raise ValidationError(f"p_drop must lie in [0, 1], got {self.p_drop}")
        targets = np.searchsorted(self.classes_, y)
        seed = int(self.random_state)
        self.model_ = SliceClassifier(self._ae_config(), len(self.classes_), self.head_dim, np.random.default_rng([seed, 0]))
        rng = np.random.default_rng([seed, 1])
        filt = self._filter()
        base = [active_patch_filter(s, filt) if filt else s for s in X]
        prep = self.preprocessing(filtered=False)
        n_ch = 2 * self.n_bins
        opt = AdamW(self.model_.parameters(), lr=self.lr)
        self.report_ = ClassifierReport()
        for epoch in range(1, self.epochs + 1):
            grids = [prep.grids(drop_events(s, self.p_drop, rng)) for s in base]
            order = rng.permutation(len(base))
            total, correct = 0.0, 0
            for i in range(0, len(order), self.batch_size):
                idx = order[i : i + self.batch_size]
                batch, lengths = _stack([grids[j] for j in idx], n_ch, self.size)
                opt.zero_grad()
                with Tape() as tape:
                    logits = self.model_(batch, lengths, True, rng)
                value, grad = softmax_cross_entropy(logits.data, targets[idx])
                tape.backward(logits, grad)
                opt.step()
                total += value * len(idx)
                correct += int(np.sum(logits.data.argmax(axis=1) == targets[idx]))
            self.report_.epochs.append(epoch)
            self.report_.train_loss.append(total / len(base))
            self.report_.train_accuracy.append(correct / len(base))
            if validation is not None:
                self.report_.val_accuracy.append(self.score(*validation))
            log.info("classifier epoch %d: loss %.4f", epoch, total / len(base))
        return self

    def decision_function(self, X: list[EventStream], preprocessing: PreprocessConfig | None = None) -> np.ndarray:
        return np.stack([p.logits for p in self.classify_many(X, preprocessing)])

    def classify_many(self, X, preprocessing: PreprocessConfig | None = None, batch_size: int = 32) -> list[Prediction]:
        check_is_fitted(self, "model_")
        prep = preprocessing or self.preprocessing()
        grids = [prep.grids(s) for s in X]
        out: list[Prediction | None] = [None] * len(grids)
        live = [i for i, g in enumerate(grids) if len(g)]
        for i in range(0, len(live), batch_size):
            idx = live[i : i + batch_size]
            batch, lengths = _stack([grids[j] for j in idx], 2 * self.n_bins, self.size)
            with no_tape():
                logits = self.model_(batch, lengths).data
            for j, row in zip(idx, logits):
                out[j] = Prediction(int(self.classes_[row.argmax()]), row)
        empty = Prediction(None, np.zeros(len(self.classes_)))
        return [p if p is not None else empty for p in out]

    def predict(self, X, preprocessing: PreprocessConfig | None = None) -> np.ndarray:
        """Class labels; ``-1`` marks streams left empty by preprocessing."""
        return np.array([-1 if p.label is None else p.label for p in self.classify_many(X, preprocessing)])

    def score(self, X, y, sample_weight=None) -> float:
        """Accuracy, with unclassifiable streams counted as wrong."""
        return float(np.mean(self.predict(X) == np.asarray(y)))

    def save(self, path) -> None:
        check_is_fitted(self, "model_")
        meta = {"kind": "classifier", "params": self.get_params(), "classes": [int(c) for c in self.classes_]}
        save_checkpoint(path, self.model_.parameters(), meta)

    @classmethod
    def load(cls, path) -> GestureClassifier:
        ck = load_checkpoint(path)
        if ck.meta.get("kind") != "classifier":
            raise ValidationError(f"{path}: not a classifier checkpoint")
        est = cls(**ck.meta["params"])
        est.classes_ = np.array(ck.meta["classes"])
        est.model_ = SliceClassifier(est._ae_config(), len(est.classes_), est.head_dim, np.random.default_rng(0))
        restore_params(est.model_.parameters(), ck)
        return est


def classify(classifier: GestureClassifier, stream: EventStream, preprocessing: PreprocessConfig | None = None) -> Prediction:
    """Filter, slice, voxelize, encode, pool and score one stream.

    A stream with nothing left after preprocessing yields ``Prediction(None, zeros(K))``.
    """
    return classifier.classify_many([stream], preprocessing)[0]

