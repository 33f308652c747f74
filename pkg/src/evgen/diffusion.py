"""Conditional latent diffusion with classifier-free guidance.

A latent sequence ``x0`` is the ``(num_slices, latent_dim)`` stack of
autoencoder encodings of one event stream. The forward process is
``z_t = gamma_t * x0 + sigma_t * eps`` with ``gamma_t**2 + sigma_t**2 = 1``;
the denoiser predicts ``eps`` and is trained on a conditional and an
unconditional (all-zero embedding) pass for every batch element.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import EventFormatError, ValidationError, check_same_shape
from .nn import GELU, AdamW, Dense, Parameter, Tape, Tensor, load_checkpoint, no_tape, restore_params, save_checkpoint
from .nn import ops

__all__ = [
    "DiffusionSchedule",
    "make_schedule",
    "forward_noise",
    "cfg_epsilon",
    "predict_x0",
    "ClassEmbedding",
    "FileEmbedding",
    "embed",
    "read_embeddings",
    "write_embeddings",
    "Denoiser",
    "train_step",
    "sample",
    "fit_latent_sequence",
    "ConditionalLatentDiffusion",
]


@dataclass(frozen=True, eq=False)
class DiffusionSchedule:
    """Per-step signal scale ``gamma`` and noise scale ``sigma``.

    Index 0 is the clean signal (gamma=1, sigma=0); steps ``1..T`` add noise.
    """

    T: int
    kind: str
    gamma: np.ndarray
    sigma: np.ndarray
    weight: np.ndarray

    @property
    def alpha_bar(self) -> np.ndarray:
        return self.gamma**2


def make_schedule(T: int, kind: str = "cosine") -> DiffusionSchedule:
    if T < 2:
        raise ValidationError(f"need at least 2 diffusion steps, got {T}")
    if kind == "linear":
        # beta range rescaled so that any T ends close to pure noise
        scale = 1000.0 / T
        betas = np.linspace(scale * 1e-4, min(scale * 0.02, 0.999), T)
        alpha_bar = np.cumprod(1.0 - betas)
    elif kind == "cosine":
        s = 0.008
        steps = np.arange(T + 1) / T
        f = np.cos((steps + s) / (1 + s) * math.pi / 2) ** 2
        betas = np.clip(1.0 - f[1:] / f[:-1], 0.0, 0.999)
        alpha_bar = np.cumprod(1.0 - betas)
    else:
        raise ValidationError(f"unknown schedule kind {kind!r}")
    alpha_bar = np.concatenate([[1.0], alpha_bar])
    gamma = np.sqrt(alpha_bar)
    sigma = np.sqrt(1.0 - alpha_bar)
    return DiffusionSchedule(T, kind, gamma, sigma, np.ones(T + 1))


def forward_noise(x0, t, eps, schedule: DiffusionSchedule) -> np.ndarray:
    """``gamma_t * x0 + sigma_t * eps``; ``t`` may be an int or one step per leading-axis row."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    check_same_shape(x0, eps, "x0 vs noise")
    g, s = _coef(schedule.gamma, t, x0.ndim), _coef(schedule.sigma, t, x0.ndim)
    return g * x0 + s * eps


def _coef(table: np.ndarray, t, ndim: int):
    if np.ndim(t) == 0:
        return table[int(t)]
    vals = table[np.asarray(t, dtype=np.int64)]
    return vals.reshape(vals.shape + (1,) * (ndim - vals.ndim))


def cfg_epsilon(eps_cond, eps_uncond, w: float):
    return w * np.asarray(eps_cond, dtype=np.float64) + (1.0 - w) * np.asarray(eps_uncond, dtype=np.float64)


def predict_x0(z_t, eps, t, schedule: DiffusionSchedule) -> np.ndarray:
    g = _coef(schedule.gamma, t, np.ndim(z_t))
    if np.any(np.asarray(g) <= 0):
        raise ValidationError("gamma_t is zero; x0 is not recoverable at this step")
    return (np.asarray(z_t, dtype=np.float64) - _coef(schedule.sigma, t, np.ndim(z_t)) * np.asarray(eps)) / g


# -- conditioning -------------------------------------------------------------

_EMB_MAGIC = b"EVEM"


class ClassEmbedding:
    """Learned embedding table, one trainable row per class; key ``None`` is unconditional."""

    def __init__(self, names: list[str], embed_dim: int, rng: np.random.Generator):
        self.names = list(names)
        self.embed_dim = embed_dim
        self.table = Parameter(rng.standard_normal((len(names), embed_dim)), "cond.table")

    def index(self, key) -> int:
        if isinstance(key, (int, np.integer)) and 0 <= key < len(self.names):
            return int(key)
        if isinstance(key, str) and key in self.names:
            return self.names.index(key)
        raise LookupError(f"unknown condition {key!r}; available: {self.names} or ids 0..{len(self.names) - 1}")

    def parameters(self) -> list[Parameter]:
        return [self.table]

    def lookup(self, keys) -> Tensor:
        keys = list(keys)
        cond = [i for i, k in enumerate(keys) if k is not None]
        if len(cond) == len(keys):
            return ops.take_rows(self.table, [self.index(k) for k in keys])
        mask = np.zeros((len(keys), 1))
        mask[cond] = 1.0
        idx = [self.index(k) if k is not None else 0 for k in keys]
        return ops.mul(ops.take_rows(self.table, idx), Tensor(mask))

    def vector(self, key) -> np.ndarray:
        if key is None:
            return np.zeros(self.embed_dim)
        return self.table.data[self.index(key)].copy()


class FileEmbedding:
    """Fixed vectors loaded from an EVEM file."""

    def __init__(self, vectors: dict[str, np.ndarray]):
        if not vectors:
            raise ValidationError("embedding file is empty")
        dims = {v.shape for v in vectors.values()}
        if len(dims) != 1:
            raise ValidationError("embedding vectors differ in length")
        self.vectors = dict(vectors)
        self.embed_dim = next(iter(dims))[0]
        self.names = list(vectors)

    @classmethod
    def from_file(cls, path) -> FileEmbedding:
        return cls(read_embeddings(path))

    def parameters(self) -> list[Parameter]:
        return []

    def vector(self, key) -> np.ndarray:
        if key is None:
            return np.zeros(self.embed_dim)
        if key not in self.vectors:
            raise LookupError(f"unknown prompt {key!r}; available: {sorted(self.vectors)}")
        return self.vectors[key].copy()

    def lookup(self, keys) -> Tensor:
        return Tensor(np.stack([self.vector(k) for k in keys]))


def embed(provider, key) -> np.ndarray:
    return provider.vector(key)


def write_embeddings(path, vectors: dict[str, np.ndarray]) -> None:
    """EVEM: magic, count (u32), dim (u32), then per entry key length (u32), UTF-8 key, dim float32 values."""
    vecs = {k: np.asarray(v, dtype=np.float64).ravel() for k, v in vectors.items()}
    dim = len(next(iter(vecs.values()))) if vecs else 0
    parts = [_EMB_MAGIC, struct.pack("<II", len(vecs), dim)]
    for key, v in vecs.items():
        if len(v) != dim:
            raise ValidationError(f"embedding {key!r} has length {len(v)}, expected {dim}")
        raw = key.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, v.astype("<f4").tobytes()]
    Path(path).write_bytes(b"".join(parts))


def read_embeddings(path) -> dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:4] != _EMB_MAGIC:
        raise EventFormatError(f"{path}: not an EVEM embedding file")
    count, dim = struct.unpack_from("<II", raw, 4)
    pos, out = 12, {}
    try:
        for _ in range(count):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            key = raw[pos : pos + n].decode("utf-8")
            pos += n
            out[key] = np.frombuffer(raw, dtype="<f4", count=dim, offset=pos).astype(np.float64)
            pos += 4 * dim
    except (struct.error, ValueError) as exc:
        raise EventFormatError(f"{path}: corrupt embedding file ({exc})") from None
    return out


# -- denoiser -------------------------------------------------------------------


class NoisePredictor(Protocol):
    def __call__(self, z: Tensor, t: np.ndarray, cond: Tensor, training: bool = False, rng=None) -> Tensor: ...

    def parameters(self) -> list[Parameter]: ...


def timestep_embedding(t: np.ndarray, T: int, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10_000.0) * np.arange(half) / max(half - 1, 1))
    args = (np.asarray(t, dtype=np.float64) / T * 1000.0)[:, None] * freqs[None]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@dataclass(frozen=True)
class DenoiserConfig:
    num_slices: int = 32
    latent_dim: int = 64
    embed_dim: int = 32
    hidden_dim: int = 256
    time_dim: int = 32
    T: int = 200


class Denoiser:
    """Small encoder-decoder noise predictor with a skip connection.

    The flattened noisy latent is concatenated with the condition vector,
    projected to ``hidden_dim``, squeezed through a bottleneck and expanded
    back, with every hidden layer modulated by ``h * (1 + scale) + shift``
    computed from the time and condition embeddings.
    """

    def __init__(self, config: DenoiserConfig, rng: np.random.Generator, provider=None):
        c = config
        self.config = c
        n_in = c.num_slices * c.latent_dim
        h, hb = c.hidden_dim, c.hidden_dim // 2
        self.provider = provider
        self.time_proj = Dense(c.time_dim, h, rng, name="dm.time")
        self.cond_proj = Dense(c.embed_dim, h, rng, name="dm.cond")
        self.inp = Dense(n_in + c.embed_dim, h, rng, name="dm.in")
        self.down = Dense(h, hb, rng, name="dm.down")
        self.up = Dense(hb, h, rng, name="dm.up")
        self.out = Dense(h + n_in, n_in, rng, name="dm.out")
        self.mod = [
            (Dense(h, h, rng, name="dm.mod0.scale"), Dense(h, h, rng, name="dm.mod0.shift")),
            (Dense(h, hb, rng, name="dm.mod1.scale"), Dense(h, hb, rng, name="dm.mod1.shift")),
            (Dense(h, h, rng, name="dm.mod2.scale"), Dense(h, h, rng, name="dm.mod2.shift")),
        ]
        for scale, shift in self.mod:
            scale.weight.data *= 0.1
            scale.bias.data[...] = 0.0
            shift.weight.data *= 0.1
            shift.bias.data[...] = 0.0
        self._gelu = GELU()

    def parameters(self) -> list[Parameter]:
        params = []
        if self.provider is not None:
            params += self.provider.parameters()
        for layer in (self.time_proj, self.cond_proj, self.inp, self.down, self.up, self.out):
            params += layer.parameters()
        for scale, shift in self.mod:
            params += scale.parameters() + shift.parameters()
        return params

    def condition(self, keys) -> Tensor:
        if self.provider is None:
            raise ValidationError("denoiser has no condition provider")
        return self.provider.lookup(keys)

    def _modulate(self, h: Tensor, emb: Tensor, k: int) -> Tensor:
        scale, shift = self.mod[k]
        return ops.add(ops.add(h, ops.mul(h, scale(emb))), shift(emb))

    def __call__(self, z: Tensor, t: np.ndarray, cond: Tensor, training: bool = False, rng=None) -> Tensor:
        c = self.config
        b = z.shape[0]
        if z.shape[1:] != (c.num_slices, c.latent_dim):
            raise ValidationError(f"expected latents (B, {c.num_slices}, {c.latent_dim}), got {z.shape}")
        flat = ops.reshape(z, (b, -1))
        temb = Tensor(timestep_embedding(t, c.T, c.time_dim))
        emb = ops.gelu(ops.add(self.time_proj(temb), self.cond_proj(cond)))
        h0 = self._modulate(ops.gelu(self.inp(ops.concat([flat, cond], axis=1))), emb, 0)
        h1 = self._modulate(ops.gelu(self.down(h0)), emb, 1)
        h2 = ops.add(self._modulate(ops.gelu(self.up(h1)), emb, 2), h0)
        out = self.out(ops.concat([h2, flat], axis=1))
        return ops.reshape(out, z.shape)


def _zeros_like_cond(denoiser, n: int) -> Tensor:
    dim = denoiser.provider.embed_dim if getattr(denoiser, "provider", None) is not None else denoiser.config.embed_dim
    return Tensor(np.zeros((n, dim)))


def train_step(denoiser, x0: np.ndarray, keys, schedule: DiffusionSchedule, optimizer: AdamW | None, seed: int) -> float:
    """One noise-prediction step on a batch of latent sequences.

    Each element is evaluated twice, with its condition and with the zero
    embedding; the loss is the MSE between predicted and true noise over
    both passes.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 3 or len(x0) == 0:
        raise ValidationError(f"expected a non-empty (B, S, D) latent batch, got {x0.shape}")
    b = len(x0)
    rng = np.random.default_rng(seed)
    t = rng.integers(1, schedule.T + 1, size=b)
    eps = rng.standard_normal(x0.shape)
    z = forward_noise(x0, t, eps, schedule)
    if optimizer is not None:
        optimizer.zero_grad()
    z2 = np.concatenate([z, z])
    t2 = np.concatenate([t, t])
    target = np.concatenate([eps, eps])
    with Tape() as tape:
        cond = ops.concat([denoiser.condition(keys), _zeros_like_cond(denoiser, b)], axis=0)
        pred = denoiser(Tensor(z2), t2, cond, True, rng)
    diff = pred.data - target
    loss = float(np.mean(diff * diff))
    if optimizer is not None:
        tape.backward(pred, 2.0 * diff / diff.size)
        optimizer.step()
    return loss


def _timesteps(schedule: DiffusionSchedule, steps: int) -> np.ndarray:
    if not 1 <= steps <= schedule.T:
        raise ValidationError(f"steps must lie in [1, {schedule.T}], got {steps}")
    ts = np.unique(np.round(np.linspace(schedule.T, 1, steps)).astype(np.int64))[::-1]
    return ts


def sample(
    denoiser, cond_key, w: float, steps: int, schedule: DiffusionSchedule, seed: int, n: int = 1, shape=None, clip: float | None = None
) -> np.ndarray:
    """Ancestral sampling with classifier-free guidance; the last step returns the predicted ``x0``.

    With ``clip`` set, every ``x0`` prediction is clamped to ``[-clip, clip]``
    before it is re-noised. Near ``t = T`` the prediction divides by a tiny
    ``gamma``, and a large guidance scale amplifies the resulting error; the
    clamp keeps the trajectory inside the range the data occupies.
    """
    if shape is None:
        shape = (denoiser.config.num_slices, denoiser.config.latent_dim)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((n, *shape))
    ab = schedule.alpha_bar
    ts = _timesteps(schedule, steps)
    with no_tape():
        cond = denoiser.condition([cond_key] * n)
        uncond = _zeros_like_cond(denoiser, n)
        for i, t in enumerate(ts):
            tt = np.full(n, t)
            eps_c = denoiser(Tensor(z), tt, cond).data
            eps_u = eps_c if w == 1 else denoiser(Tensor(z), tt, uncond).data
            eps = cfg_epsilon(eps_c, eps_u, w)
            x_hat = predict_x0(z, eps, t, schedule)
            if clip is not None:
                x_hat = np.clip(x_hat, -clip, clip)
            if i == len(ts) - 1:
                return x_hat
            s = ts[i + 1]
            a_ts = ab[t] / ab[s]
            b_ts = 1.0 - a_ts
            mean = (np.sqrt(ab[s]) * b_ts / (1.0 - ab[t])) * x_hat + (np.sqrt(a_ts) * (1.0 - ab[s]) / (1.0 - ab[t])) * z
            var = b_ts * (1.0 - ab[s]) / (1.0 - ab[t])
            z = mean + np.sqrt(var) * rng.standard_normal(z.shape)
    return z


def fit_latent_sequence(latents: np.ndarray, num_slices: int) -> np.ndarray:
    """Zero-pad or truncate a ``(n, latent_dim)`` stack to exactly ``num_slices`` rows."""
    latents = np.asarray(latents, dtype=np.float64)
    if len(latents) >= num_slices:
        return latents[:num_slices].copy()
    pad = np.zeros((num_slices - len(latents), latents.shape[1]))
    return np.concatenate([latents, pad])


class ConditionalLatentDiffusion(BaseEstimator):
    """Estimator wrapper: ``fit(X, y)`` on latent sequences and class labels, ``sample`` new ones.

    Latents are standardized per feature before training; ``sample``
    returns them in the original scale.
    """

    def __init__(
        self,
        T=200,
        schedule="cosine",
        hidden_dim=256,
        embed_dim=32,
        time_dim=32,
        guidance=7.5,
        n_iter=3000,
        batch_size=32,
        lr=1e-3,
        weight_decay=1e-2,
        class_names=None,
        embeddings=None,
        random_state=0,
    ):
        self.T = T
        self.schedule = schedule
        self.hidden_dim = hidden_dim
        self.embed_dim = embed_dim
        self.time_dim = time_dim
        self.guidance = guidance
        self.n_iter = n_iter
        self.batch_size = batch_size
        self.lr = lr
        self.weight_decay = weight_decay
        self.class_names = class_names
        self.embeddings = embeddings
        self.random_state = random_state

    def _build(self, num_slices, latent_dim, names, vectors=None):
        seed = int(self.random_state)
        if vectors is None and self.embeddings is not None:
            vectors = read_embeddings(self.embeddings)
        if vectors is not None:
            provider = FileEmbedding(vectors)
            missing = [n for n in names if n not in provider.vectors]
            if missing:
                raise LookupError(f"class names {missing} have no vector in the embedding file")
            self.train_keys_ = list(names)
        else:
            provider = ClassEmbedding(names, self.embed_dim, np.random.default_rng([seed, 1]))
            self.train_keys_ = list(range(len(names)))
        cfg = DenoiserConfig(num_slices, latent_dim, provider.embed_dim, self.hidden_dim, self.time_dim, self.T)
        self.class_names_ = list(names)
        self.denoiser_ = Denoiser(cfg, np.random.default_rng([seed, 2]), provider)
        self.schedule_ = make_schedule(self.T, self.schedule)

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y, dtype=np.int64)
        if X.ndim != 3 or len(X) != len(y) or len(X) == 0:
            raise ValidationError(f"expected (n, num_slices, latent_dim) latents with n labels, got {X.shape}, {y.shape}")
        names = list(self.class_names) if self.class_names is not None else [str(i) for i in range(int(y.max()) + 1)]
        self._build(X.shape[1], X.shape[2], names)
        self.mean_ = X.mean(axis=(0, 1))
        self.scale_ = X.std(axis=(0, 1)) + 1e-6
        Xn = (X - self.mean_) / self.scale_
        self.clip_ = float(np.abs(Xn).max())
        self.optimizer_ = AdamW(self.denoiser_.parameters(), lr=self.lr, weight_decay=self.weight_decay)
        rng = np.random.default_rng([int(self.random_state), 3])
        self.loss_curve_ = []
        for it in range(self.n_iter):
            idx = rng.choice(len(Xn), size=min(self.batch_size, len(Xn)), replace=False)
            keys = [self.train_keys_[i] for i in y[idx]]
            loss = train_step(self.denoiser_, Xn[idx], keys, self.schedule_, self.optimizer_, int(rng.integers(2**31)))
            self.loss_curve_.append(loss)
        return self

    def sample(self, key, n=1, seed=0, guidance=None, steps=None) -> np.ndarray:
        check_is_fitted(self, "denoiser_")
        w = self.guidance if guidance is None else guidance
        z = sample(self.denoiser_, key, w, steps or self.T, self.schedule_, seed, n, clip=self.clip_)
        return z * self.scale_ + self.mean_

    def save(self, path) -> None:
        check_is_fitted(self, "denoiser_")
        meta = {
            "kind": "diffusion",
            "params": {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.get_params().items()},
            "config": asdict(self.denoiser_.config),
            "class_names": self.class_names_,
            "embeddings": (
                {k: v.tolist() for k, v in self.denoiser_.provider.vectors.items()}
                if isinstance(self.denoiser_.provider, FileEmbedding)
                else None
            ),
            "mean": self.mean_.tolist(),
            "scale": self.scale_.tolist(),
            "clip": self.clip_,
        }
        save_checkpoint(path, self.denoiser_.parameters(), meta, self.optimizer_)

    @classmethod
    def load(cls, path) -> ConditionalLatentDiffusion:
        ck = load_checkpoint(path)
        if ck.meta.get("kind") != "diffusion":
            raise ValidationError(f"{path}: not a diffusion checkpoint")
        est = cls(**ck.meta["params"])
        cfg = ck.meta["config"]
        est.class_names = ck.meta["class_names"]
        vectors = ck.meta.get("embeddings")
        if vectors is not None:
            vectors = {k: np.asarray(v, dtype=np.float64) for k, v in vectors.items()}
        est._build(cfg["num_slices"], cfg["latent_dim"], ck.meta["class_names"], vectors)
        restore_params(est.denoiser_.parameters(), ck)
        est.mean_ = np.asarray(ck.meta["mean"])
        est.scale_ = np.asarray(ck.meta["scale"])
        est.clip_ = ck.meta.get("clip")
        est.optimizer_ = AdamW(est.denoiser_.parameters(), lr=est.lr, weight_decay=est.weight_decay)
        est.optimizer_.load_state_arrays(ck.optimizer())
        return est
