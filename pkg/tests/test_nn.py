import numpy as np
import pytest

from asense import nn
from conftest import fd_check


def naive_conv(x, w, b, stride, pad):
    B, C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Ho, Wo = (H + 2 * pad - k) // stride + 1, (W + 2 * pad - k) // stride + 1
    y = np.zeros((B, O, Ho, Wo))
    for n in range(B):
        for o in range(O):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    y[n, o, i, j] = np.sum(patch * w[o]) + b[o]
    return y


def naive_conv_transpose(x, w, b, stride, pad):
    B, C, H, W = x.shape
    _, O, k, _ = w.shape
    full = np.zeros((B, O, (H - 1) * stride + k, (W - 1) * stride + k))
    for n in range(B):
        for c in range(C):
            for i in range(H):
                for j in range(W):
                    full[n, :, i * stride:i * stride + k, j * stride:j * stride + k] += x[n, c, i, j] * w[c]
    Ho, Wo = full.shape[2] - 2 * pad, full.shape[3] - 2 * pad
    return full[:, :, pad:pad + Ho, pad:pad + Wo] + b[None, :, None, None]


class TestConvolutions:
    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (2, 1, 3), (1, 1, 3), (2, 0, 2)])
    def test_conv_matches_loops(self, rng, stride, pad, k):
        layer = nn.Conv2d(3, 4, k, stride, pad)
        p = layer.init(rng)
        p["bias"] = rng.normal(size=4)
        x = rng.normal(size=(2, 3, 7, 7))
        np.testing.assert_allclose(layer.forward(p, x), naive_conv(x, p["weight"], p["bias"], stride, pad), atol=1e-12)

    @pytest.mark.parametrize("stride,pad,k", [(2, 1, 4), (1, 1, 3), (1, 0, 2), (3, 0, 3)])
    def test_conv_transpose_matches_scatter(self, rng, stride, pad, k):
        layer = nn.ConvTranspose2d(3, 2, k, stride, pad)
        p = layer.init(rng)
        p["bias"] = rng.normal(size=2)
        x = rng.normal(size=(2, 3, 5, 5))
        np.testing.assert_allclose(layer.forward(p, x), naive_conv_transpose(x, p["weight"], p["bias"], stride, pad),
                                   atol=1e-12)

    def test_transpose_is_adjoint_of_conv(self, rng):
        # <conv(x), y> == <x, convT(y)> with shared weights and no bias
        conv = nn.Conv2d(3, 5, 4, 2, 1)
        tconv = nn.ConvTranspose2d(5, 3, 4, 2, 1)
        w = rng.normal(size=(5, 3, 4, 4))
        x = rng.normal(size=(2, 3, 14, 14))
        y = rng.normal(size=(2, 5, 7, 7))
        lhs = np.sum(conv.forward({"weight": w, "bias": np.zeros(5)}, x) * y)
        rhs = np.sum(x * tconv.forward({"weight": w, "bias": np.zeros(3)}, y))
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_decoder_shapes(self):
        net = [nn.Dense(16, 8 * 49), nn.Reshape((8, 7, 7)), nn.ConvTranspose2d(8, 8, 4, 2, 1),
               nn.ConvTranspose2d(8, 4, 4, 2, 1), nn.ConvTranspose2d(4, 1, 3, 1, 1)]
        assert nn.check_shapes(net, (16,))[-1] == (1, 28, 28)


class TestBackward:
    def _check(self, net, x, rng, skip_input=False):
        params = nn.init_params(net, rng)
        for k in params:
            params[k] = params[k] + 0.1 * rng.normal(size=params[k].shape)
        acts = nn.forward(net, params, x)
        gy = rng.normal(size=acts[-1].shape)

        def loss():
            return float(np.sum(nn.forward(net, params, x)[-1] * gy))

        grads, gx = nn.backward(net, params, acts, gy)
        worst = 0.0 if skip_input else fd_check(loss, x, gx, rng=rng)
        for name, g in grads.items():
            worst = max(worst, fd_check(loss, params[name], g, rng=rng))
        return worst

    def test_small_encoder(self, rng):
        net = [nn.Conv2d(1, 3, 3, 2, 1), nn.Affine(3), nn.Sigmoid(), nn.Flatten(), nn.Dense(3 * 49, 4)]
        assert self._check(net, rng.normal(size=(2, 1, 14, 14)), rng) < 1e-5

    def test_small_decoder(self, rng):
        net = [nn.Dense(4, 2 * 9), nn.Reshape((2, 3, 3)), nn.ConvTranspose2d(2, 3, 4, 2, 1), nn.Sigmoid(),
               nn.ConvTranspose2d(3, 1, 3, 1, 1)]
        assert self._check(net, rng.normal(size=(3, 4)), rng) < 1e-5

    def test_input_only_backward_matches(self, rng):
        net = [nn.Dense(4, 2 * 9), nn.Reshape((2, 3, 3)), nn.ConvTranspose2d(2, 1, 4, 2, 1), nn.Sigmoid()]
        params = nn.init_params(net, rng)
        acts = nn.forward(net, params, rng.normal(size=(2, 4)))
        gy = rng.normal(size=acts[-1].shape)
        g_full, gx_full = nn.backward(net, params, acts, gy)
        g_none, gx = nn.backward(net, params, acts, gy, param_grads=False)
        assert g_none == {} and g_full
        np.testing.assert_array_equal(gx, gx_full)

    def test_relu_gradient_masks_negative(self):
        x = np.array([[-1.0, 0.5, 2.0]])
        _, gx = nn.ReLU().backward({}, x, None, np.ones_like(x))
        np.testing.assert_array_equal(gx, [[0.0, 1.0, 1.0]])


class TestValidation:
    def test_shape_error_names_layer(self):
        net = [nn.Conv2d(1, 2, 3, 2, 1), nn.Flatten(), nn.Dense(99, 3)]
        with pytest.raises(nn.ShapeError, match=r"layer 2 \(dense\)"):
            nn.check_shapes(net, (1, 28, 28))

    def test_backward_rejects_wrong_grad_shape(self, rng):
        net = [nn.Dense(3, 2)]
        p = nn.init_params(net, rng)
        acts = nn.forward(net, p, np.ones((4, 3)))
        with pytest.raises(nn.ShapeError):
            nn.backward(net, p, acts, np.ones((4, 3)))

    def test_layer_roundtrip(self):
        for layer in (nn.Dense(3, 4), nn.Conv2d(1, 2, 3, 2, 1), nn.ConvTranspose2d(2, 1, 4, 2, 1),
                      nn.Affine(5), nn.ReLU(), nn.Sigmoid(), nn.Flatten(), nn.Reshape((2, 3))):
            assert nn.layer_from_dict(layer.to_dict()) == layer

    def test_sigmoid_is_stable(self):
        s = nn.sigmoid(np.array([-800.0, 0.0, 800.0]))
        assert np.all(np.isfinite(s))
        np.testing.assert_allclose(s, [0.0, 0.5, 1.0])


class TestAdam:
    def test_first_step_hand_value(self):
        # m_hat = g, v_hat = g^2, step = lr * g / (|g| + eps)
        p = {"w": np.array([1.0, -2.0])}
        nn.adam_step(p, {"w": np.array([1.0, -3.0])}, nn.AdamState())
        np.testing.assert_allclose(p["w"], [1.0 - 0.001 / (1 + 1e-8), -2.0 + 0.001 * 3 / (3 + 1e-8)], rtol=0, atol=1e-15)

    def test_matches_reference_recurrence(self, rng):
        g_seq = rng.normal(size=(25, 3))
        p = {"w": np.zeros(3)}
        st = nn.AdamState(learning_rate=0.01)
        m = v = np.zeros(3)
        w = np.zeros(3)
        for t, g in enumerate(g_seq, start=1):
            nn.adam_step(p, {"w": g}, st)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        np.testing.assert_allclose(p["w"], w, rtol=1e-12)

    def test_frozen_params_untouched(self):
        p = {"a": np.ones(2), "b": np.ones(2)}
        nn.adam_step(p, {"a": np.ones(2)}, nn.AdamState())
        np.testing.assert_array_equal(p["b"], 1.0)

    def test_non_finite_gradient_raises(self):
        p = {"a": np.ones(2)}
        with pytest.raises(nn.NonFiniteGradientError, match="'a'"):
            nn.adam_step(p, {"a": np.array([1.0, np.nan])}, nn.AdamState())
        np.testing.assert_array_equal(p["a"], 1.0)
