"""Generation pipeline and the evaluation harness for generated samples.

Generation runs three stages: sample a latent sequence from the diffusion
model, decode each row to a probability grid, and draw Bernoulli events
slice by slice. Evaluation classifies the generated streams and aggregates
accuracy per class and per user-defined group.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Protocol

import numpy as np

from ._validation import ValidationError
from .autoencoder import StagedAutoencoder
from .classifier import Prediction
from .diffusion import ConditionalLatentDiffusion
from .events import EVENT_DTYPE, EventStream
from .nn import Tensor, no_tape
from .voxel import PreprocessConfig, bernoulli_sample, boost

__all__ = ["GenerationPipeline", "EvalReport", "evaluate_generated", "derive_seed"]


def derive_seed(*parts: int) -> int:
    """A 32-bit seed that depends only on the integer tuple ``parts``."""
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


@dataclass
class GenerationPipeline:
    autoencoder: StagedAutoencoder
    diffusion: ConditionalLatentDiffusion
    slice_us: int = 125_000
    guidance: float = 7.5
    steps: int | None = None

    @property
    def size(self) -> int:
        return self.autoencoder.size

    def check_key(self, key) -> None:
        """Raise ``LookupError`` if the condition provider does not know ``key``."""
        self.diffusion.denoiser_.provider.vector(key)

    def probabilities(self, key, n: int = 1, seed: int = 0) -> np.ndarray:
        """``(n, num_slices, 2C, M, M)`` decoded probability grids for condition ``key``."""
        z = self.diffusion.sample(key, n=n, seed=seed, guidance=self.guidance, steps=self.steps)
        n_, s, d = z.shape
        with no_tape():
            probs = self.autoencoder.decode(Tensor(z.reshape(n_ * s, d))).data
        return probs.reshape(n_, s, *probs.shape[1:])

    def events_from_probabilities(self, probs: np.ndarray, boost_factor: float = 1.0, seed: int = 0, label: int | None = None) -> EventStream:
        """Bernoulli-sample one ``(num_slices, 2C, M, M)`` stack; slice ``k`` covers ``[k, k+1) * slice_us``."""
        parts = []
        for k, p in enumerate(probs):
            sl = bernoulli_sample(boost(p, boost_factor), k * self.slice_us, (k + 1) * self.slice_us, derive_seed(seed, k))
            parts.append(sl.events)
        events = np.concatenate(parts) if parts else np.zeros(0, dtype=EVENT_DTYPE)
        return EventStream(self.size, self.size, events, None if label is None else int(label))

    def generate(self, key, seed: int = 0, boost_factor: float = 1.0, label: int | None = None) -> EventStream:
        probs = self.probabilities(key, 1, derive_seed(seed, 0))[0]
        return self.events_from_probabilities(probs, boost_factor, derive_seed(seed, 1), label)

    def preprocessing(self, cap: float = 1.0) -> PreprocessConfig:
        """Slice generated streams along their own generation windows, without noise filtering."""
        n_bins = self.autoencoder.config.n_bins
        return PreprocessConfig(None, 1, self.slice_us, n_bins, self.size, cap, self.diffusion.denoiser_.config.num_slices)


class StreamClassifier(Protocol):
    def classify_many(self, streams, preprocessing=None) -> list[Prediction]: ...


@dataclass
class EvalReport:
    per_class: dict[int, float]
    per_group: dict[str, float]
    overall: float
    n_samples: int
    seed: int
    boost: float
    class_counts: dict[int, int] = field(default_factory=dict)
    unclassifiable: int = 0

    def to_dict(self) -> dict:
        return {
            "per_class": {str(k): v for k, v in sorted(self.per_class.items())},
            "per_group": dict(sorted(self.per_group.items())),
            "overall": self.overall,
            "n_samples": self.n_samples,
            "seed": self.seed,
            "boost": self.boost,
            "class_counts": {str(k): v for k, v in sorted(self.class_counts.items())},
            "unclassifiable": self.unclassifiable,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def aggregate(truth, predicted, groups: dict[str, list[int]] | None, seed: int, boost_factor: float) -> EvalReport:
    """Per-class accuracy plus count-weighted group and overall means; ``None`` predictions count as wrong."""
    truth = [int(t) for t in truth]
    hits = [p is not None and int(p) == t for t, p in zip(truth, predicted)]
    classes = sorted(set(truth))
    counts = {c: sum(1 for t in truth if t == c) for c in classes}
    per_class = {c: sum(h for t, h in zip(truth, hits) if t == c) / counts[c] for c in classes}

    def weighted(members):
        members = [c for c in members if c in counts]
        n = sum(counts[c] for c in members)
        return sum(per_class[c] * counts[c] for c in members) / n if n else float("nan")

    per_group = {name: weighted(members) for name, members in (groups or {}).items()}
    return EvalReport(
        per_class,
        per_group,
        weighted(classes) if classes else float("nan"),
        len(truth),
        int(seed),
        float(boost_factor),
        counts,
        sum(p is None for p in predicted),
    )


def evaluate_generated(
    pipeline: GenerationPipeline,
    classifier: StreamClassifier,
    prompts: dict[str, int],
    samples_per_prompt: int,
    boost_factor=3.0,
    seed: int = 0,
    groups: dict[str, list[int]] | None = None,
    preprocessing: PreprocessConfig | None = None,
):
    """Generate ``samples_per_prompt`` streams per prompt, classify them and aggregate.

    ``boost_factor`` may be a single factor (returns one :class:`EvalReport`)
    or a sequence; in the latter case every factor is applied to the same
    decoded probabilities and Bernoulli draws, and a list of reports is
    returned in the same order.
    """
    if samples_per_prompt < 1:
        raise ValidationError("samples_per_prompt must be >= 1")
    for prompt in prompts:
        pipeline.check_key(prompt)
    factors = [boost_factor] if np.isscalar(boost_factor) else list(boost_factor)
    prep = preprocessing or pipeline.preprocessing()
    probs, truth = [], []
    for j, (prompt, cls) in enumerate(prompts.items()):
        stack = pipeline.probabilities(prompt, samples_per_prompt, derive_seed(seed, j))
        probs += list(stack)
        truth += [int(cls)] * samples_per_prompt
    reports = []
    for f in factors:
        streams = [pipeline.events_from_probabilities(p, f, derive_seed(seed, 10_000 + i), t) for i, (p, t) in enumerate(zip(probs, truth))]
        preds = [p.label for p in classifier.classify_many(streams, prep)]
        reports.append(aggregate(truth, preds, groups, seed, f))
    return reports[0] if np.isscalar(boost_factor) else reports
