import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import rel_err
from fbpnet.nn import functional as F
from fbpnet.nn.io import FormatError, decode_arrays, encode_arrays, load_arrays, save_arrays
from fbpnet.nn.layers import BatchNorm, Conv2d, Deconv2d, Parameter, ReLU
from fbpnet.nn.optim import Adam, AdamState, adam_step


def naive_correlate(x, w, b):
    """Six nested loops over batch, rows, cols, output channel and taps."""
    bsz, h, wd, ci = x.shape
    kh, kw, _, co = w.shape
    ph, pw = kh // 2, kw // 2
    out = np.zeros((bsz, h, wd, co))
    for n in range(bsz):
        for r in range(h):
            for c in range(wd):
                for o in range(co):
                    acc = b[o]
                    for i in range(kh):
                        for j in range(kw):
                            rr, cc = r + i - ph, c + j - pw
                            if 0 <= rr < h and 0 <= cc < wd:
                                acc += x[n, rr, cc, :] @ w[i, j, :, o]
                    out[n, r, c, o] = acc
    return out


def numeric_grad(f, x, eps=1e-6, coords=None):
    grad = {}
    for idx in coords:
        d = np.zeros_like(x)
        d[idx] = eps
        grad[idx] = (f(x + d) - f(x - d)) / (2 * eps)
    return grad


def sample_coords(rng, shape, k=15):
    flat = rng.choice(int(np.prod(shape)), size=min(k, int(np.prod(shape))), replace=False)
    return [tuple(np.unravel_index(i, shape)) for i in flat]


def assert_grads_close(analytic, numeric, tol=1e-6):
    for idx, fd in numeric.items():
        assert abs(analytic[idx] - fd) <= tol * max(1.0, abs(fd)), idx


class TestConv:
    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_matches_naive(self, rng, k):
        x = rng.normal(size=(2, 6, 7, 3))
        w = rng.normal(size=(k, k, 3, 4))
        b = rng.normal(size=4)
        assert rel_err(F.conv2d_forward(x, w, b), naive_correlate(x, w, b)) <= 1e-12

    def test_identity_kernel(self, rng):
        x = rng.normal(size=(1, 5, 5, 2))
        w = np.zeros((3, 3, 2, 2))
        w[1, 1] = np.eye(2)
        assert np.array_equal(F.conv2d_forward(x, w, np.zeros(2)), x)

    def test_gradients(self, rng):
        x = rng.normal(size=(2, 5, 6, 2))
        w = rng.normal(size=(3, 3, 2, 3))
        b = rng.normal(size=3)
        g = rng.normal(size=(2, 5, 6, 3))
        dx, dw, db = F.conv2d_backward(x, w, g)
        loss_x = lambda z: np.vdot(F.conv2d_forward(z, w, b), g)
        loss_w = lambda z: np.vdot(F.conv2d_forward(x, z, b), g)
        loss_b = lambda z: np.vdot(F.conv2d_forward(x, w, z), g)
        assert_grads_close(dx, numeric_grad(loss_x, x, coords=sample_coords(rng, x.shape)))
        assert_grads_close(dw, numeric_grad(loss_w, w, coords=sample_coords(rng, w.shape)))
        assert_grads_close(db, numeric_grad(loss_b, b, coords=[(i,) for i in range(3)]))

    def test_rejects_even_kernel_and_channel_mismatch(self, rng):
        with pytest.raises(ValueError):
            F.conv2d_forward(np.zeros((1, 4, 4, 1)), np.zeros((2, 2, 1, 1)), np.zeros(1))
        with pytest.raises(ValueError):
            F.conv2d_forward(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 1, 1)), np.zeros(1))


class TestDeconv:
    def test_is_adjoint_of_conv(self, rng):
        w = rng.normal(size=(5, 5, 3, 4))
        x = rng.normal(size=(2, 7, 6, 3))
        y = rng.normal(size=(2, 7, 6, 4))
        lhs = np.vdot(F.conv2d_forward(x, w, np.zeros(4)), y)
        rhs = np.vdot(x, F.deconv2d_forward(y, w, np.zeros(3)))
        assert abs(lhs - rhs) <= 1e-10 * abs(lhs)

    def test_gradients(self, rng):
        x = rng.normal(size=(2, 5, 5, 3))
        w = rng.normal(size=(3, 3, 2, 3))
        b = rng.normal(size=2)
        g = rng.normal(size=(2, 5, 5, 2))
        dx, dw, db = F.deconv2d_backward(x, w, g)
        loss_x = lambda z: np.vdot(F.deconv2d_forward(z, w, b), g)
        loss_w = lambda z: np.vdot(F.deconv2d_forward(x, z, b), g)
        assert_grads_close(dx, numeric_grad(loss_x, x, coords=sample_coords(rng, x.shape)))
        assert_grads_close(dw, numeric_grad(loss_w, w, coords=sample_coords(rng, w.shape)))
        assert np.allclose(db, g.sum(axis=(0, 1, 2)))

    def test_layer_output_channels(self, rng):
        layer = Deconv2d(4, 1, 5, rng)
        assert layer.weight.shape == (5, 5, 1, 4)
        assert layer.forward(np.zeros((1, 8, 8, 4))).shape == (1, 8, 8, 1)


class TestBatchNorm:
    def test_train_mode_normalises(self, rng):
        bn = BatchNorm(3)
        x = rng.normal(3.0, 2.0, size=(4, 5, 5, 3))
        out = bn.forward(x, train=True)
        assert np.allclose(out.mean(axis=(0, 1, 2)), 0.0, atol=1e-12)
        var = x.var(axis=(0, 1, 2))
        assert np.allclose(out.var(axis=(0, 1, 2)), var / (var + 1e-3), rtol=1e-12)

    def test_running_statistics(self, rng):
        bn = BatchNorm(2)
        x = rng.normal(size=(3, 4, 4, 2))
        bn.forward(x, train=True)
        assert np.allclose(bn.running_mean, 0.01 * x.mean(axis=(0, 1, 2)), rtol=1e-12)
        assert np.allclose(bn.running_var, 0.99 + 0.01 * x.var(axis=(0, 1, 2)), rtol=1e-12)

    def test_inference_uses_running_statistics(self, rng):
        bn = BatchNorm(2)
        bn.running_mean[:] = [1.0, -2.0]
        bn.running_var[:] = [4.0, 0.25]
        bn.scale.value[:] = [2.0, 1.0]
        bn.shift.value[:] = [0.5, 0.0]
        x = rng.normal(size=(1, 3, 3, 2))
        expect = (x - bn.running_mean) / np.sqrt(bn.running_var + 1e-3) * bn.scale.value + bn.shift.value
        assert np.allclose(bn.forward(x, train=False), expect, rtol=1e-12)

    @pytest.mark.parametrize("train", [True, False])
    def test_gradients(self, rng, train):
        x = rng.normal(size=(3, 4, 4, 2))
        gamma = rng.normal(size=2)
        beta = rng.normal(size=2)
        g = rng.normal(size=x.shape)
        rm, rv = np.array([0.3, -0.1]), np.array([1.5, 0.7])

        def run(xx, gg=gamma, bb=beta):
            return F.batchnorm_forward(xx, gg, bb, rm.copy(), rv.copy(), train)[0]

        _, cache = F.batchnorm_forward(x, gamma, beta, rm.copy(), rv.copy(), train)
        dx, dg, db = F.batchnorm_backward(g, cache)
        assert_grads_close(dx, numeric_grad(lambda z: np.vdot(run(z), g), x,
                                            coords=sample_coords(rng, x.shape)))
        assert_grads_close(dg, numeric_grad(lambda z: np.vdot(run(x, z), g), gamma, coords=[(0,), (1,)]))
        assert_grads_close(db, numeric_grad(lambda z: np.vdot(run(x, gamma, z), g), beta, coords=[(0,), (1,)]))

    def test_train_batch_of_one_rejected(self):
        with pytest.raises(ValueError):
            BatchNorm(1).forward(np.zeros((1, 2, 2, 1)), train=True)

    def test_invalid_hyperparameters(self):
        with pytest.raises(ValueError):
            BatchNorm(1, momentum=1.0)
        with pytest.raises(ValueError):
            BatchNorm(1, eps=0.0)


class TestActivationsAndLoss:
    def test_relu(self):
        x = np.array([-1.0, 0.0, 2.0])
        assert np.array_equal(F.relu_forward(x), [0.0, 0.0, 2.0])
        assert np.array_equal(F.relu_backward(x, np.ones(3)), [0.0, 0.0, 1.0])

    def test_relu_layer(self):
        layer = ReLU()
        layer.forward(np.array([-3.0, 4.0]))
        assert np.array_equal(layer.backward(np.array([5.0, 6.0])), [0.0, 6.0])
        assert layer.parameters() == {}

    def test_mse_sums_pixels_and_averages_batch(self):
        a = np.zeros((2, 3, 3))
        b = np.ones((2, 3, 3))
        b[1] *= 2.0
        assert F.mse(a, b) == pytest.approx((9 * 1 + 9 * 4) / 2)

    def test_mse_grad(self, rng):
        a, b = rng.normal(size=(2, 3, 4, 4))
        numeric = numeric_grad(lambda z: F.mse(z, b), a, coords=sample_coords(rng, a.shape))
        assert_grads_close(F.mse_grad(a, b), numeric)

    def test_mse_shape_mismatch(self):
        with pytest.raises(ValueError):
            F.mse(np.zeros((1, 2)), np.zeros((1, 3)))


def scripted_adam(p, grads, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1 ** t)) / (np.sqrt(v / (1 - b2 ** t)) + eps)
    return p


class TestAdam:
    def test_zero_gradient_is_a_no_op(self):
        p = {"w": np.array([1.0, -2.0])}
        adam_step(p, {"w": np.zeros(2)}, AdamState())
        assert np.array_equal(p["w"], [1.0, -2.0])

    def test_first_step_moves_by_lr(self):
        p = {"w": np.array([0.0, 0.0])}
        adam_step(p, {"w": np.array([3.0, -0.5])}, AdamState(lr=0.01))
        assert np.allclose(p["w"], [-0.01, 0.01], rtol=1e-6)

    def test_matches_scripted_oracle(self, rng):
        grads = rng.normal(size=(10, 4))
        start = rng.normal(size=4)
        p = {"w": start.copy()}
        state = AdamState(lr=0.05)
        for g in grads:
            adam_step(p, {"w": g}, state)
        assert rel_err(p["w"], scripted_adam(start, grads, lr=0.05)) <= 1e-10
        assert state.step == 10

    def test_non_finite_gradient_skips(self, caplog):
        p = {"w": np.ones(2)}
        state = AdamState()
        with caplog.at_level(logging.WARNING):
            assert not adam_step(p, {"w": np.array([np.nan, 1.0])}, state)
        assert np.array_equal(p["w"], np.ones(2)) and state.step == 0
        assert "non-finite" in caplog.text

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            adam_step({"w": np.ones(2)}, {"w": np.ones(3)}, AdamState())

    def test_optimizer_on_parameters(self):
        param = Parameter(np.array([5.0]))
        opt = Adam({"p": param}, lr=0.5)
        for _ in range(200):
            opt.zero_grad()
            param.grad += 2.0 * param.value
            opt.step()
        assert abs(param.value[0]) < 0.1

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.floats(-1e3, 1e3, allow_nan=False), min_size=1, max_size=6))
    def test_first_step_bounded_by_lr(self, g):
        g = np.array(g)
        p = {"w": np.zeros_like(g)}
        adam_step(p, {"w": g}, AdamState(lr=1e-2))
        assert np.all(np.abs(p["w"]) <= 1e-2 + 1e-15)


class TestLayers:
    def test_conv_layer_accumulates_gradients(self, rng):
        layer = Conv2d(2, 3, 3, rng)
        x = rng.normal(size=(2, 4, 4, 2))
        layer.forward(x)
        g = rng.normal(size=(2, 4, 4, 3))
        layer.backward(g)
        first = layer.weight.grad.copy()
        layer.backward(g)
        assert np.allclose(layer.weight.grad, 2 * first)
        layer.weight.zero_grad()
        assert not layer.weight.grad.any()

    def test_he_init_scale(self, rng):
        w = Conv2d(16, 16, 3, rng).weight.value
        assert w.std() == pytest.approx(np.sqrt(2.0 / (9 * 16)), rel=0.1)


class TestArrayIO:
    def test_round_trip(self, tmp_path, rng):
        arrays = {"a": rng.normal(size=(2, 3)), "b": np.arange(4.0), "s": np.array(1.5)}
        save_arrays(tmp_path / "x.fbpa", arrays)
        back = load_arrays(tmp_path / "x.fbpa")
        assert list(back) == list(arrays)
        for k in arrays:
            assert np.array_equal(back[k], arrays[k]) and back[k].shape == arrays[k].shape

    def test_encoding_is_deterministic(self, rng):
        arrays = {"w": rng.normal(size=5)}
        assert encode_arrays(arrays) == encode_arrays({"w": arrays["w"].copy()})

    @pytest.mark.parametrize("payload", [b"", b"NOTMAGIC" + bytes(16)])
    def test_corrupt_payload(self, payload):
        with pytest.raises(FormatError):
            decode_arrays(payload)

    def test_truncated_payload(self, rng):
        blob = encode_arrays({"w": rng.normal(size=10)})
        with pytest.raises(FormatError):
            decode_arrays(blob[:-8])
