import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from evgen._validation import EventFormatError, ValidationError
from evgen.diffusion import (
    ClassEmbedding,
    ConditionalLatentDiffusion,
    Denoiser,
    DiffusionSchedule,
    DenoiserConfig,
    FileEmbedding,
    cfg_epsilon,
    embed,
    fit_latent_sequence,
    forward_noise,
    make_schedule,
    predict_x0,
    read_embeddings,
    sample,
    train_step,
    write_embeddings,
)
from evgen.nn import Tensor


class TestSchedule:
    @pytest.mark.parametrize("kind", ["cosine", "linear"])
    @pytest.mark.parametrize("T", [2, 50, 200, 1000])
    def test_variance_preserving(self, kind, T):
        s = make_schedule(T, kind)
        np.testing.assert_allclose(s.gamma**2 + s.sigma**2, 1.0, atol=1e-12)
        assert s.gamma[0] == 1.0 and s.sigma[0] == 0.0
        assert np.all(np.diff(s.gamma) <= 0)
        assert s.gamma[-1] < 0.1

    def test_unknown_kind(self):
        with pytest.raises(ValidationError):
            make_schedule(10, "sqrt")

    def test_too_few_steps(self):
        with pytest.raises(ValidationError):
            make_schedule(1)


@given(st.integers(1, 199), st.integers(0, 2**31))
def test_predict_x0_inverts_forward_noise(t, seed):
    s = make_schedule(200)
    rng = np.random.default_rng(seed)
    x0, eps = rng.standard_normal((3, 4)), rng.standard_normal((3, 4))
    z = forward_noise(x0, t, eps, s)
    np.testing.assert_allclose(predict_x0(z, eps, t, s), x0, atol=1e-10)


def test_forward_noise_per_row_steps():
    s = make_schedule(100)
    x0, eps = np.ones((3, 2, 2)), np.zeros((3, 2, 2))
    z = forward_noise(x0, np.array([1, 50, 100]), eps, s)
    np.testing.assert_allclose(z[:, 0, 0], s.gamma[[1, 50, 100]])


def test_predict_x0_rejects_zero_gamma():
    pure_noise = DiffusionSchedule(1, "test", np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.ones(2))
    with pytest.raises(ValidationError):
        predict_x0(np.zeros(2), np.zeros(2), 1, pure_noise)


class TestCfg:
    @given(st.floats(-5, 5), st.floats(-5, 5))
    def test_w_one_is_conditional(self, a, b):
        assert cfg_epsilon(np.array([a]), np.array([b]), 1.0)[0] == a

    def test_w_zero_is_unconditional(self):
        assert cfg_epsilon(np.array([2.0]), np.array([3.0]), 0.0)[0] == 3.0

    def test_extrapolation(self):
        # w * c + (1 - w) * u
        assert cfg_epsilon(np.array([1.0]), np.array([0.0]), 7.5)[0] == 7.5


class PlantedOracle:
    """Predicts the exact noise for data concentrated at a point ``x_star`` (per condition)."""

    def __init__(self, x_star: dict, schedule, shape):
        self.x_star = x_star
        self.schedule = schedule
        self.config = DenoiserConfig(num_slices=shape[0], latent_dim=shape[1], embed_dim=1)
        self.provider = self

    embed_dim = 1

    def condition(self, keys):
        return Tensor(np.array([[1.0 + k] for k in keys]))

    def __call__(self, z, t, cond, training=False, rng=None):
        key = int(round(cond.data[0, 0])) - 1
        x = self.x_star.get(key, np.zeros(z.shape[1:]))
        g = self.schedule.gamma[t][:, None, None]
        s = self.schedule.sigma[t][:, None, None]
        return Tensor((z.data - g * x) / s)


class TestSampler:
    @pytest.mark.parametrize("w", [1.0, 7.5])
    @pytest.mark.parametrize("steps", [200, 25])
    def test_planted_oracle_recovery(self, w, steps):
        s = make_schedule(200)
        target = np.random.default_rng(0).standard_normal((4, 3))
        # unconditional and conditional predictions agree, so guidance is neutral
        oracle = PlantedOracle({0: target, -1: target}, s, target.shape)
        out = sample(oracle, 0, w, steps, s, seed=1, n=3)
        np.testing.assert_allclose(out, np.broadcast_to(target, out.shape), atol=1e-6)

    def test_guidance_one_skips_unconditional(self):
        s = make_schedule(50)
        target = np.ones((2, 2))
        oracle = PlantedOracle({0: target}, s, target.shape)  # unconditional would pull to zero
        out = sample(oracle, 0, 1.0, 50, s, seed=0)
        np.testing.assert_allclose(out[0], target, atol=1e-6)

    def test_deterministic(self):
        rng = np.random.default_rng(0)
        d = Denoiser(DenoiserConfig(2, 3, 4, 16, 8, 20), rng, ClassEmbedding(["a", "b"], 4, rng))
        s = make_schedule(20)
        a = sample(d, 1, 7.5, 20, s, seed=5, n=2)
        b = sample(d, 1, 7.5, 20, s, seed=5, n=2)
        assert a.tobytes() == b.tobytes()

    def test_clip_bounds_every_prediction(self):
        s = make_schedule(50)
        far = np.full((2, 2), 10.0)
        out = sample(PlantedOracle({0: far, -1: far}, s, far.shape), 0, 7.5, 50, s, seed=0, clip=3.0)
        np.testing.assert_allclose(out, 3.0)
        # a planted point inside the bound is still recovered exactly
        near = np.full((2, 2), 0.5)
        out = sample(PlantedOracle({0: near, -1: near}, s, near.shape), 0, 7.5, 50, s, seed=0, clip=3.0)
        np.testing.assert_allclose(out[0], near, atol=1e-6)

    def test_bad_step_count(self):
        s = make_schedule(20)
        with pytest.raises(ValidationError):
            sample(PlantedOracle({}, s, (1, 1)), 0, 1.0, 21, s, seed=0)


class ZeroPredictor:
    def __init__(self, shape, embed_dim=2):
        self.config = DenoiserConfig(shape[0], shape[1], embed_dim)
        self.provider = ClassEmbedding(["a"], embed_dim, np.random.default_rng(0))
        self.seen = []

    def condition(self, keys):
        return self.provider.lookup(keys)

    def __call__(self, z, t, cond, training=False, rng=None):
        self.seen.append((z.data.copy(), np.asarray(t).copy(), cond.data.copy()))
        return Tensor(np.zeros(z.shape))


class TestTrainStep:
    def test_zero_predictor_loss_is_noise_power(self):
        s = make_schedule(50)
        x0 = np.random.default_rng(1).standard_normal((4, 2, 3))
        stub = ZeroPredictor((2, 3))
        loss = train_step(stub, x0, [0] * 4, s, None, seed=9)
        rng = np.random.default_rng(9)
        rng.integers(1, 51, size=4)
        eps = rng.standard_normal(x0.shape)
        assert abs(loss - np.mean(eps * eps)) < 1e-12

    def test_conditional_and_unconditional_pass(self):
        s = make_schedule(50)
        stub = ZeroPredictor((1, 2))
        train_step(stub, np.zeros((3, 1, 2)), [0, 0, 0], s, None, seed=0)
        z, t, cond = stub.seen[0]
        assert z.shape == (6, 1, 2)
        np.testing.assert_array_equal(z[:3], z[3:])
        np.testing.assert_array_equal(t[:3], t[3:])
        assert np.all(t >= 1) and np.all(t <= 50)
        assert np.all(cond[3:] == 0) and np.any(cond[:3] != 0)

    def test_empty_batch(self):
        with pytest.raises(ValidationError):
            train_step(ZeroPredictor((1, 2)), np.zeros((0, 1, 2)), [], make_schedule(10), None, 0)

    def test_real_denoiser_loss_decreases(self):
        rng = np.random.default_rng(0)
        d = Denoiser(DenoiserConfig(2, 2, 4, 32, 8, 50), rng, ClassEmbedding(["a", "b"], 4, rng))
        from evgen.nn import AdamW

        opt = AdamW(d.parameters(), lr=3e-3)
        s = make_schedule(50)
        x0 = np.tile(np.array([[1.0, -1.0], [0.5, 0.5]]), (16, 1, 1))
        losses = [train_step(d, x0, [0] * 16, s, opt, seed=i) for i in range(150)]
        assert np.mean(losses[-20:]) < 0.5 * np.mean(losses[:20])


class TestEmbeddings:
    def test_class_embedding_lookup(self):
        emb = ClassEmbedding(["cw", "ccw"], 3, np.random.default_rng(0))
        np.testing.assert_array_equal(embed(emb, "ccw"), emb.table.data[1])
        np.testing.assert_array_equal(embed(emb, 0), emb.table.data[0])
        np.testing.assert_array_equal(embed(emb, None), np.zeros(3))
        with pytest.raises(LookupError):
            embed(emb, "wave")
        with pytest.raises(LookupError):
            embed(emb, 2)

    def test_mixed_null_lookup(self):
        emb = ClassEmbedding(["a", "b"], 2, np.random.default_rng(0))
        out = emb.lookup([1, None]).data
        np.testing.assert_array_equal(out[1], 0.0)
        np.testing.assert_array_equal(out[0], emb.table.data[1])

    def test_evem_round_trip(self, tmp_path):
        vecs = {"turn left": np.array([0.5, -1.0, 2.0]), "wave": np.array([0.0, 0.25, 1.0])}
        write_embeddings(tmp_path / "e.evem", vecs)
        back = read_embeddings(tmp_path / "e.evem")
        assert list(back) == list(vecs)
        for k in vecs:
            np.testing.assert_array_equal(back[k], vecs[k])
        prov = FileEmbedding.from_file(tmp_path / "e.evem")
        assert prov.embed_dim == 3
        with pytest.raises(LookupError):
            prov.vector("jump")

    def test_evem_bad_magic_and_truncation(self, tmp_path):
        (tmp_path / "x.evem").write_bytes(b"EVXX" + bytes(8))
        with pytest.raises(EventFormatError):
            read_embeddings(tmp_path / "x.evem")
        write_embeddings(tmp_path / "t.evem", {"a": np.ones(4)})
        raw = (tmp_path / "t.evem").read_bytes()
        (tmp_path / "t.evem").write_bytes(raw[:-3])
        with pytest.raises(EventFormatError):
            read_embeddings(tmp_path / "t.evem")

    def test_mismatched_lengths(self, tmp_path):
        with pytest.raises(ValidationError):
            write_embeddings(tmp_path / "m.evem", {"a": np.ones(2), "b": np.ones(3)})


def test_fit_latent_sequence():
    z = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(fit_latent_sequence(z, 2), z[:2])
    padded = fit_latent_sequence(z, 5)
    assert padded.shape == (5, 2) and not padded[3:].any()


def _two_cluster_data(n=48, seed=0):
    rng = np.random.default_rng(seed)
    y = np.arange(n) % 2
    centers = np.array([[2.0, -1.0], [-2.0, 1.0]])
    X = centers[y][:, None, :] + 0.1 * rng.standard_normal((n, 1, 2))
    return X, y


class TestEstimator:
    KW = dict(T=50, hidden_dim=32, embed_dim=4, time_dim=8, n_iter=400, batch_size=16, lr=3e-3, random_state=0)

    def test_conditional_samples_land_near_their_class(self):
        X, y = _two_cluster_data()
        dm = ConditionalLatentDiffusion(class_names=["a", "b"], **self.KW).fit(X, y)
        for k, center in enumerate([[2.0, -1.0], [-2.0, 1.0]]):
            z = dm.sample(k, n=20, seed=k, guidance=2.0)
            assert z.shape == (20, 1, 2)
            np.testing.assert_allclose(z.mean(axis=(0, 1)), center, atol=0.6)
            # samples stay inside the standardized range seen in training
            assert np.all(np.abs((z - dm.mean_) / dm.scale_) <= dm.clip_ + 1e-9)

    def test_save_load_identical_samples(self, tmp_path):
        X, y = _two_cluster_data(16)
        dm = ConditionalLatentDiffusion(**{**self.KW, "n_iter": 5}).fit(X, y)
        dm.save(tmp_path / "dm.evck")
        back = ConditionalLatentDiffusion.load(tmp_path / "dm.evck")
        np.testing.assert_allclose(back.sample(1, 2, seed=3), dm.sample(1, 2, seed=3), atol=1e-4)
        assert back.clip_ == dm.clip_
        assert back.class_names_ == ["0", "1"]

    def test_fit_bytes_deterministic(self, tmp_path):
        X, y = _two_cluster_data(16)
        for name in ("a", "b"):
            ConditionalLatentDiffusion(**{**self.KW, "n_iter": 5}).fit(X, y).save(tmp_path / f"{name}.evck")
        assert (tmp_path / "a.evck").read_bytes() == (tmp_path / "b.evck").read_bytes()

    def test_file_embeddings(self, tmp_path):
        write_embeddings(tmp_path / "p.evem", {"left": np.array([1.0, 0.0]), "right": np.array([0.0, 1.0]), "up": np.ones(2)})
        X, y = _two_cluster_data(16)
        dm = ConditionalLatentDiffusion(class_names=["left", "right"], embeddings=str(tmp_path / "p.evem"), **{**self.KW, "n_iter": 5})
        dm.fit(X, y)
        assert dm.sample("up", 1, seed=0).shape == (1, 1, 2)  # any prompt in the file works
        with pytest.raises(LookupError):
            dm.sample("down", 1)
        dm.save(tmp_path / "dm.evck")
        assert ConditionalLatentDiffusion.load(tmp_path / "dm.evck").sample("left", 1).shape == (1, 1, 2)

    def test_file_embeddings_missing_class(self, tmp_path):
        write_embeddings(tmp_path / "p.evem", {"left": np.ones(2)})
        X, y = _two_cluster_data(8)
        with pytest.raises(LookupError):
            ConditionalLatentDiffusion(class_names=["left", "right"], embeddings=str(tmp_path / "p.evem"), n_iter=1).fit(X, y)

    def test_bad_input(self):
        with pytest.raises(ValidationError):
            ConditionalLatentDiffusion(n_iter=1).fit(np.zeros((3, 2)), [0, 1, 0])
