import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.signal import correlate

from evgen._validation import EventFormatError, UsageError, ValidationError
from evgen.nn import (
    GELU,
    LAYER_KINDS,
    AdamW,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    LayerSpec,
    MaxPool2,
    Parameter,
    Sequential,
    Sigmoid,
    Tape,
    Tensor,
    Unflatten,
    Upsample2,
    adamw_step,
    backward,
    check_layer_kinds,
    clip_grad_norm,
    forward,
    grad_check,
    load_checkpoint,
    no_tape,
    restore_params,
    save_checkpoint,
)
from evgen.nn import ops


class TestForwardOracles:
    def test_dense(self):
        rng = np.random.default_rng(0)
        layer = Dense(5, 3, rng)
        x = rng.standard_normal((4, 5))
        np.testing.assert_allclose(layer(Tensor(x)).data, x @ layer.weight.data + layer.bias.data)

    def test_conv2d_matches_scipy_correlate(self):
        rng = np.random.default_rng(1)
        layer = Conv2d(2, 3, rng)
        x = rng.standard_normal((2, 2, 6, 5))
        out = layer(Tensor(x)).data
        ref = np.zeros_like(out)
        for n in range(2):
            for o in range(3):
                ref[n, o] = layer.bias.data[o] + sum(
                    correlate(x[n, i], layer.weight.data[o, i], mode="same") for i in range(2)
                )
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_conv2d_preserves_spatial_size(self):
        layer = Conv2d(1, 4, np.random.default_rng(0), kernel=5)
        assert layer(Tensor(np.zeros((1, 1, 7, 9)))).shape == (1, 4, 7, 9)

    def test_maxpool(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        np.testing.assert_array_equal(MaxPool2()(Tensor(x)).data[0, 0], [[5, 7], [13, 15]])

    def test_maxpool_odd_rejected(self):
        with pytest.raises(ValidationError):
            MaxPool2()(Tensor(np.zeros((1, 1, 3, 4))))

    def test_upsample(self):
        x = np.array([[[[1.0, 2.0], [3.0, 4.0]]]])
        np.testing.assert_array_equal(Upsample2()(Tensor(x)).data[0, 0], np.kron([[1, 2], [3, 4]], np.ones((2, 2))))

    def test_gelu_exact_erf_form(self):
        x = np.linspace(-4, 4, 17)
        ref = [v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in x]
        np.testing.assert_allclose(GELU()(Tensor(x)).data, ref, atol=1e-15)

    def test_sigmoid(self):
        x = np.array([-50.0, -1.0, 0.0, 2.0, 50.0])
        np.testing.assert_allclose(Sigmoid()(Tensor(x)).data, 1 / (1 + np.exp(-x)), rtol=1e-12)

    def test_flatten_unflatten(self):
        x = np.arange(24.0).reshape(2, 3, 2, 2)
        f = Flatten()(Tensor(x))
        assert f.shape == (2, 12)
        np.testing.assert_array_equal(Unflatten((3, 2, 2))(f).data, x)

    def test_dropout_eval_is_identity(self):
        x = np.random.default_rng(0).standard_normal((3, 4))
        assert Dropout(0.5)(Tensor(x)).data is not None
        np.testing.assert_array_equal(Dropout(0.5)(Tensor(x), training=False).data, x)

    def test_dropout_eval_equals_network_without_dropout(self):
        rng = np.random.default_rng(2)
        d1, d2 = Dense(4, 4, rng), Dense(4, 2, rng)
        x = rng.standard_normal((5, 4))
        with_drop = Sequential([d1, GELU(), Dropout(0.4), d2])
        without = Sequential([d1, GELU(), d2])
        np.testing.assert_array_equal(with_drop(Tensor(x)).data, without(Tensor(x)).data)

    def test_dropout_training_scales(self):
        out = Dropout(0.5)(Tensor(np.ones((200, 200))), training=True, rng=np.random.default_rng(0)).data
        assert set(np.unique(out)) <= {0.0, 2.0}
        assert abs(out.mean() - 1.0) < 0.02

    def test_dropout_training_requires_rng(self):
        with pytest.raises(ValidationError):
            Dropout(0.5)(Tensor(np.ones(3)), training=True)

    def test_shape_error_names_layer(self):
        net = Sequential([Dense(3, 2, np.random.default_rng(0)), Dense(4, 1, np.random.default_rng(0))])
        with pytest.raises(ValidationError, match="layer 1"):
            net(Tensor(np.zeros((1, 3))))

    def test_layer_spec_kinds(self):
        with pytest.raises(ValidationError):
            LayerSpec("attention")
        net = Sequential.from_specs([LayerSpec("dense", {"n_in": 3, "n_out": 2}), LayerSpec("gelu")], np.random.default_rng(0))
        assert net(Tensor(np.zeros((1, 3)))).shape == (1, 2)


class TestGradients:
    def test_every_layer_kind_passes(self):
        reports = check_layer_kinds(seed=0, tolerance=1e-4)
        assert set(reports) == set(LAYER_KINDS)
        for kind, rep in reports.items():
            assert rep.passed, (kind, rep.errors)

    def test_dense_gelu_stack(self):
        rng = np.random.default_rng(3)
        net = Sequential([Dense(6, 5, rng), GELU(), Dense(5, 3, rng), GELU()])
        assert grad_check(net, rng.standard_normal((4, 6))).max_error < 1e-4

    def test_conv_pool_stack(self):
        rng = np.random.default_rng(4)
        net = Sequential([Conv2d(2, 3, rng), GELU(), MaxPool2(), Conv2d(3, 2, rng), Upsample2(), Sigmoid()])
        x = rng.standard_normal((2, 2, 4, 4))
        assert grad_check(net, x).max_error < 1e-4

    @given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 1000))
    def test_random_conv_shapes(self, c_in, c_out, half, seed):
        rng = np.random.default_rng(seed)
        net = Sequential([Conv2d(c_in, c_out, rng), GELU(), MaxPool2()])
        x = rng.standard_normal((1, c_in, 2 * half, 2 * half))
        assert grad_check(net, x).passed

    def test_segment_max_mean_gradient(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((6, 3))
        proj = rng.standard_normal((2, 6))
        xt = Tensor(x, requires_grad=True)
        with Tape() as tape:
            out = ops.segment_max_mean(xt, [2, 4])
        tape.backward(out, proj)
        num = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            xp, xm = x.copy(), x.copy()
            xp[idx] += 1e-6
            xm[idx] -= 1e-6
            f = lambda v: np.sum(ops.segment_max_mean(Tensor(v), [2, 4]).data * proj)
            num[idx] = (f(xp) - f(xm)) / 2e-6
        np.testing.assert_allclose(xt.grad, num, rtol=1e-6, atol=1e-8)

    def test_segment_max_mean_values(self):
        x = np.array([[1.0], [3.0], [2.0], [5.0], [0.0]])
        out = ops.segment_max_mean(Tensor(x), [2, 3]).data
        np.testing.assert_allclose(out, [[3.0, 2.0], [5.0, 7.0 / 3.0]])

    def test_shared_input_accumulates(self):
        a = Tensor(np.array([2.0, 3.0]), requires_grad=True)
        with Tape() as tape:
            out = ops.mul(a, a)
        tape.backward(out, np.ones(2))
        np.testing.assert_array_equal(a.grad, [4.0, 6.0])


class TestTapeContract:
    def test_stale_tape_rejected(self):
        layer = Dense(2, 1, np.random.default_rng(0))
        out, tape = forward(layer, np.ones((1, 2)))
        layer.weight.assign(layer.weight.data * 2)
        with pytest.raises(UsageError, match="stale"):
            backward(tape, out, np.ones((1, 1)))

    def test_tape_single_use(self):
        layer = Dense(2, 1, np.random.default_rng(0))
        out, tape = forward(layer, np.ones((1, 2)))
        backward(tape, out, np.ones((1, 1)))
        with pytest.raises(UsageError):
            backward(tape, out, np.ones((1, 1)))

    def test_no_tape_records_nothing(self):
        layer = Dense(2, 1, np.random.default_rng(0))
        with Tape() as tape:
            with no_tape():
                layer(Tensor(np.ones((1, 2))))
        assert tape.records == []

    def test_frozen_parameters_get_no_gradient(self):
        rng = np.random.default_rng(0)
        a, b = Dense(3, 3, rng), Dense(3, 2, rng)
        for p in a.parameters():
            p.frozen = True
        out, tape = forward(Sequential([a, GELU(), b]), rng.standard_normal((4, 3)))
        backward(tape, out, np.ones(out.shape))
        assert all(not p.grad.any() for p in a.parameters())
        assert all(p.grad.any() for p in b.parameters())

    def test_deterministic_forward_backward(self):
        def run():
            rng = np.random.default_rng(7)
            net = Sequential([Conv2d(2, 2, rng), GELU(), Dropout(0.3), Flatten(), Dense(32, 2, rng)])
            out, tape = forward(net, rng.standard_normal((2, 2, 4, 4)), training=True, seed=3)
            backward(tape, out, np.ones(out.shape))
            return out.data.tobytes(), b"".join(p.grad.tobytes() for p in net.parameters())

        assert run() == run()


class TestAdamW:
    def test_single_step_formula(self):
        p = Parameter(np.array([1.0, -2.0]), "p")
        p.grad[...] = [0.5, -0.25]
        adamw_step([p], lr=0.1, weight_decay=0.01)
        # first step: m_hat = g, v_hat = g^2, so the update is lr * sign(g) (up to eps)
        expected = np.array([1.0, -2.0]) * (1 - 0.1 * 0.01) - 0.1 * np.sign([0.5, -0.25]) * (np.abs([0.5, -0.25]) / (np.abs([0.5, -0.25]) + 1e-8))
        np.testing.assert_allclose(p.data, expected, rtol=1e-12)

    def test_least_squares_converges_to_lstsq(self):
        rng = np.random.default_rng(0)
        A = rng.standard_normal((64, 4))
        y = A @ np.array([1.0, -2.0, 0.5, 3.0]) + 0.01 * rng.standard_normal(64)
        w = Parameter(np.zeros(4), "w")
        opt = AdamW([w], lr=0.05, weight_decay=0.0)
        for _ in range(2000):
            opt.zero_grad()
            w.grad[...] = 2 * A.T @ (A @ w.data - y) / len(y)
            opt.step()
        np.testing.assert_allclose(w.data, np.linalg.lstsq(A, y, rcond=None)[0], atol=1e-4)

    def test_frozen_parameter_untouched(self):
        rng = np.random.default_rng(1)
        net = Sequential([Dense(3, 3, rng), GELU(), Dense(3, 1, rng)])
        for p in net.parameters():
            p.frozen = True
        before = [p.data.copy() for p in net.parameters()]
        opt = AdamW(net.parameters(), lr=0.1)
        for _ in range(5):
            opt.zero_grad()
            out, tape = forward(net, rng.standard_normal((4, 3)))
            backward(tape, out, np.ones(out.shape))
            opt.step()
        assert all(np.array_equal(a, p.data) for a, p in zip(before, net.parameters()))

    def test_clip_grad_norm(self):
        p = Parameter(np.zeros(2), "p")
        p.grad[...] = [3.0, 4.0]
        assert clip_grad_norm([p], 1.0) == 5.0
        np.testing.assert_allclose(p.grad, [0.6, 0.8])


class TestCheckpoint:
    def test_round_trip_float32(self, tmp_path):
        rng = np.random.default_rng(0)
        net = Sequential([Dense(3, 4, rng, name="a"), Conv2d(1, 2, rng, name="b")])
        net.layers[0].weight.frozen = True
        save_checkpoint(tmp_path / "m.evck", net.parameters(), {"kind": "test", "n": 3})
        ck = load_checkpoint(tmp_path / "m.evck")
        assert ck.meta == {"kind": "test", "n": 3}
        for p in net.parameters():
            np.testing.assert_array_equal(ck.tensors[p.name], p.data.astype(np.float32).astype(np.float64))
        assert ck.frozen["a.weight"] and not ck.frozen["a.bias"]

    def test_restore(self, tmp_path):
        rng = np.random.default_rng(0)
        src = Dense(3, 2, rng, name="d")
        save_checkpoint(tmp_path / "d.evck", src.parameters())
        dst = Dense(3, 2, np.random.default_rng(9), name="d")
        restore_params(dst.parameters(), load_checkpoint(tmp_path / "d.evck"))
        np.testing.assert_allclose(dst.weight.data, src.weight.data, rtol=1e-6)

    def test_restore_missing_strict(self, tmp_path):
        save_checkpoint(tmp_path / "e.evck", [])
        with pytest.raises(EventFormatError):
            restore_params(Dense(1, 1, np.random.default_rng(0), name="x").parameters(), load_checkpoint(tmp_path / "e.evck"))

    def test_optimizer_state_round_trip(self, tmp_path):
        p = Parameter(np.ones(3), "p")
        opt = AdamW([p], lr=0.1)
        p.grad[...] = 1.0
        opt.step()
        save_checkpoint(tmp_path / "o.evck", [p], optimizer=opt)
        ck = load_checkpoint(tmp_path / "o.evck")
        assert set(ck.optimizer()) == {"adamw.step", "adamw.m/p", "adamw.v/p"}
        opt2 = AdamW([Parameter(np.ones(3), "p")], lr=0.1)
        opt2.load_state_arrays(ck.optimizer())
        assert opt2.t == 1
        np.testing.assert_allclose(opt2.m[0], opt.m[0], rtol=1e-6)

    def test_bytes_deterministic(self, tmp_path):
        for name in ("a", "b"):
            save_checkpoint(tmp_path / f"{name}.evck", Dense(3, 2, np.random.default_rng(4)).parameters(), {"x": 1})
        assert (tmp_path / "a.evck").read_bytes() == (tmp_path / "b.evck").read_bytes()

    def test_bad_magic(self, tmp_path):
        (tmp_path / "x.evck").write_bytes(b"NOPE\x01\x00\x00\x00")
        with pytest.raises(EventFormatError):
            load_checkpoint(tmp_path / "x.evck")

    def test_truncated(self, tmp_path):
        save_checkpoint(tmp_path / "t.evck", Dense(3, 2, np.random.default_rng(4)).parameters())
        raw = (tmp_path / "t.evck").read_bytes()
        (tmp_path / "t.evck").write_bytes(raw[:-5])
        with pytest.raises(EventFormatError):
            load_checkpoint(tmp_path / "t.evck")
