import json

import numpy as np
import pytest
from scipy.special import log_softmax

from evgen._validation import ValidationError
from evgen.autoencoder import AEConfig, StagedAutoencoder
from evgen.classifier import GestureClassifier, Prediction, classify, drop_events, softmax_cross_entropy
from evgen.diffusion import ConditionalLatentDiffusion
from evgen.events import EVENT_DTYPE, EventStream
from evgen.pipeline import EvalReport, GenerationPipeline, aggregate, derive_seed, evaluate_generated
from evgen.voxel import PreprocessConfig

from conftest import random_stream


def _half_plane_stream(label: int, rng, n=400, size=16):
    """Class 0 fires in the left half of the sensor, class 1 in the right half."""
    ev = np.zeros(n, dtype=EVENT_DTYPE)
    lo = 0 if label == 0 else size // 2
    ev["x"] = rng.integers(lo, lo + size // 2, n)
    ev["y"] = rng.integers(0, size, n)
    ev["t"] = np.sort(rng.integers(0, 100_000, n))
    ev["p"] = np.where(rng.random(n) < 0.5, 1, -1)
    return EventStream(size, size, ev, label)


def _half_plane_set(n_per_class, seed):
    rng = np.random.default_rng(seed)
    streams = [_half_plane_stream(k, rng) for _ in range(n_per_class) for k in (0, 1)]
    return streams, np.array([s.label for s in streams])


SMALL = dict(size=16, count=100, max_slices=3, use_filter=False, latent_dim=8, hidden_dim=32, core_channels=4,
             min_channels=2, head_dim=16, epochs=8, lr=3e-3, batch_size=8, random_state=0)


class TestLossAndAugmentation:
    def test_cross_entropy_matches_log_softmax(self):
        rng = np.random.default_rng(0)
        logits, targets = rng.standard_normal((5, 3)) * 3, np.array([0, 2, 1, 1, 0])
        loss, grad = softmax_cross_entropy(logits, targets)
        assert abs(loss + log_softmax(logits, axis=1)[np.arange(5), targets].mean()) < 1e-12
        num = np.zeros_like(logits)
        for idx in np.ndindex(logits.shape):
            p, m = logits.copy(), logits.copy()
            p[idx] += 1e-6
            m[idx] -= 1e-6
            num[idx] = (softmax_cross_entropy(p, targets)[0] - softmax_cross_entropy(m, targets)[0]) / 2e-6
        np.testing.assert_allclose(grad, num, atol=1e-8)

    def test_drop_events(self):
        s = random_stream(np.random.default_rng(0), 10_000, 16, 16)
        rng = np.random.default_rng(1)
        assert drop_events(s, 0.0, rng) is s
        assert len(drop_events(s, 1.0, rng)) == 0
        kept = drop_events(s, 0.3, rng)
        assert abs(len(kept) / 10_000 - 0.7) < 0.03
        assert kept.label == s.label and np.all(np.diff(kept.t) >= 0)


class TestGestureClassifier:
    def test_separable_classes(self):
        X, y = _half_plane_set(12, 0)
        Xt, yt = _half_plane_set(10, 1)
        clf = GestureClassifier(**SMALL).fit(X, y, validation=(Xt, yt))
        assert clf.score(Xt, yt) > 0.9
        assert len(clf.report_.val_accuracy) == SMALL["epochs"]

    def test_total_event_drop_gives_chance(self):
        X, y = _half_plane_set(8, 0)
        Xt, yt = _half_plane_set(10, 1)
        clf = GestureClassifier(**{**SMALL, "p_drop": 1.0, "epochs": 3}).fit(X, y)
        # every training input was the zero grid, so the model cannot tell the classes apart
        pred = clf.predict(Xt)
        assert len(set(pred.tolist())) == 1
        assert clf.score(Xt, yt) == 0.5

    def test_unclassifiable_stream(self):
        X, y = _half_plane_set(4, 0)
        clf = GestureClassifier(**{**SMALL, "epochs": 1}).fit(X, y)
        empty = EventStream(16, 16, np.zeros(0, dtype=EVENT_DTYPE), 0)
        p = classify(clf, empty)
        assert p == Prediction(None, p.logits) and not p.classifiable
        np.testing.assert_array_equal(p.logits, np.zeros(2))
        assert clf.predict([empty, X[0]])[0] == -1
        assert clf.score([empty], [0]) == 0.0

    def test_single_class_rejected(self):
        X, _ = _half_plane_set(2, 0)
        with pytest.raises(ValidationError):
            GestureClassifier(**SMALL).fit(X, [0] * len(X))

    def test_bad_size(self):
        X, y = _half_plane_set(2, 0)
        with pytest.raises(ValidationError):
            GestureClassifier(**{**SMALL, "size": 12}).fit(X, y)

    def test_save_load_and_determinism(self, tmp_path):
        X, y = _half_plane_set(4, 0)
        a = GestureClassifier(**{**SMALL, "epochs": 2}).fit(X, y)
        b = GestureClassifier(**{**SMALL, "epochs": 2}).fit(X, y)
        a.save(tmp_path / "a.evck")
        b.save(tmp_path / "b.evck")
        assert (tmp_path / "a.evck").read_bytes() == (tmp_path / "b.evck").read_bytes()
        back = GestureClassifier.load(tmp_path / "a.evck")
        np.testing.assert_allclose(back.decision_function(X), a.decision_function(X), atol=1e-4)

    def test_string_free_labels_kept(self):
        X, y = _half_plane_set(3, 0)
        clf = GestureClassifier(**{**SMALL, "epochs": 1}).fit(X, y + 5)
        assert set(clf.predict(X).tolist()) <= {5, 6}


def _tiny_pipeline(slice_us=1000):
    ae = StagedAutoencoder(AEConfig(final_size=8, latent_dim=4, hidden_dim=8, core_channels=2, min_channels=2), np.random.default_rng(0))
    rng = np.random.default_rng(1)
    dm = ConditionalLatentDiffusion(T=10, hidden_dim=8, embed_dim=2, time_dim=4, n_iter=2, batch_size=4, class_names=["cw", "ccw"])
    dm.fit(rng.standard_normal((8, 3, 4)), np.arange(8) % 2)
    return GenerationPipeline(ae, dm, slice_us=slice_us, guidance=7.5)


class OracleClassifier:
    """Reads the generating condition back from the stream label."""

    def classify_many(self, streams, preprocessing=None):
        return [Prediction(s.label, np.zeros(2)) for s in streams]


class TestGeneration:
    def test_probabilities_shape_and_range(self):
        pipe = _tiny_pipeline()
        p = pipe.probabilities(0, 2, seed=0)
        assert p.shape == (2, 3, 2, 8, 8)
        assert np.all((p >= 0) & (p <= 1))

    def test_slices_land_in_their_windows(self):
        pipe = _tiny_pipeline(slice_us=500)
        probs = np.full((3, 2, 8, 8), 0.5)
        s = pipe.events_from_probabilities(probs, 1.0, seed=2, label=1)
        assert s.label == 1 and s.width == s.height == 8
        k = s.t // 500
        assert set(k.tolist()) == {0, 1, 2}
        assert np.all(np.diff(s.t) >= 0)

    def test_boost_adds_events_only(self):
        pipe = _tiny_pipeline()
        probs = np.full((2, 2, 8, 8), 0.1)
        a = pipe.events_from_probabilities(probs, 1.0, seed=4)
        b = pipe.events_from_probabilities(probs, 3.0, seed=4)
        pos = lambda s: set(zip(s.x.tolist(), s.y.tolist(), s.p.tolist(), (s.t // 1000).tolist()))
        assert pos(a) <= pos(b) and len(b) > len(a)

    def test_generate_deterministic(self):
        pipe = _tiny_pipeline()
        a = pipe.generate("ccw", seed=11, boost_factor=3.0)
        b = pipe.generate("ccw", seed=11, boost_factor=3.0)
        assert a.events.tobytes() == b.events.tobytes()

    def test_unknown_prompt(self):
        with pytest.raises(LookupError):
            _tiny_pipeline().generate("wave")

    def test_preprocessing_is_time_sliced_and_unfiltered(self):
        prep = _tiny_pipeline(slice_us=2000).preprocessing()
        assert prep == PreprocessConfig(None, 1, 2000, 1, 8, 1.0, 3)

    def test_derive_seed(self):
        assert derive_seed(1, 2) == derive_seed(1, 2)
        assert len({derive_seed(0, i) for i in range(100)}) == 100


class TestEvaluation:
    def test_oracle_classifier_scores_one(self):
        pipe = _tiny_pipeline()
        reports = evaluate_generated(pipe, OracleClassifier(), {"cw": 0, "ccw": 1}, 3, [1.0, 3.0], seed=0)
        assert [r.boost for r in reports] == [1.0, 3.0]
        for r in reports:
            assert r.overall == 1.0 and r.n_samples == 6 and r.per_class == {0: 1.0, 1: 1.0}

    def test_scalar_boost_returns_single_report(self):
        r = evaluate_generated(_tiny_pipeline(), OracleClassifier(), {"cw": 0}, 2, 3.0, seed=0)
        assert isinstance(r, EvalReport) and r.boost == 3.0

    def test_unknown_prompt_fails_before_generating(self):
        with pytest.raises(LookupError):
            evaluate_generated(_tiny_pipeline(), OracleClassifier(), {"cw": 0, "wave": 1}, 2)

    def test_samples_per_prompt_positive(self):
        with pytest.raises(ValidationError):
            evaluate_generated(_tiny_pipeline(), OracleClassifier(), {"cw": 0}, 0)

    def test_deterministic_report(self):
        class Parity:
            def classify_many(self, streams, preprocessing=None):
                return [Prediction(len(s) % 2, np.zeros(2)) for s in streams]

        pipe = _tiny_pipeline()
        a = evaluate_generated(pipe, Parity(), {"cw": 0, "ccw": 1}, 4, 3.0, seed=5)
        b = evaluate_generated(pipe, Parity(), {"cw": 0, "ccw": 1}, 4, 3.0, seed=5)
        assert a.to_json() == b.to_json()

    def test_aggregate_group_weighting(self):
        truth = [0, 0, 0, 1, 2, 2]
        pred = [0, 0, 1, 0, 2, None]
        r = aggregate(truth, pred, {"rot": [0, 1], "all": [0, 1, 2], "ghost": [7]}, seed=1, boost_factor=3.0)
        assert r.per_class == {0: 2 / 3, 1: 0.0, 2: 0.5}
        # count-weighted: (2/3 * 3 + 0 * 1) / 4
        assert r.per_group["rot"] == 0.5
        assert abs(r.per_group["all"] - 3 / 6) < 1e-12
        assert np.isnan(r.per_group["ghost"])
        assert abs(r.overall - 0.5) < 1e-12
        assert r.unclassifiable == 1 and r.class_counts == {0: 3, 1: 1, 2: 2}

    def test_report_json(self):
        r = aggregate([0, 1], [0, 0], None, 3, 1.0)
        doc = json.loads(r.to_json())
        assert doc["per_class"] == {"0": 1.0, "1": 0.0}
        assert doc["overall"] == 0.5 and doc["seed"] == 3 and doc["boost"] == 1.0
