import numpy as np
import pytest

from halopatch.nn import (
    AdamW,
    Conv2d,
    Gelu,
    Sequential,
    SpectralConv2d,
    clip_grad_norm,
    cosine_lr,
    global_grad_norm,
    load_tensors,
    param_checksum,
    save_tensors,
    zero_grads,
)

RNG = np.random.default_rng(1234)


def fd_gradcheck(layer, x, seed, n_coords=16, eps=1e-6):
    """Worst relative error of analytic vs central-difference gradients
    under a random linear functional of the output."""
    rng = np.random.default_rng(seed)
    params = layer.params()
    y, cache = layer.forward(x)
    proj = rng.standard_normal(y.shape)
    zero_grads(params)
    dx = layer.backward(proj, cache)
    worst = 0.0

    def loss():
        out, _ = layer.forward(x)
        return float(np.sum(proj * out))

    flat = x.ravel()
    for idx in rng.choice(flat.size, size=min(n_coords, flat.size), replace=False):
        old = flat[idx]
        flat[idx] = old + eps
        up = loss()
        flat[idx] = old - eps
        down = loss()
        flat[idx] = old
        num = (up - down) / (2 * eps)
        ana = dx.ravel()[idx]
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-12))
    for p in params:
        pf = p.value.ravel()
        for idx in rng.choice(pf.size, size=min(n_coords, pf.size), replace=False):
            old = pf[idx]
            pf[idx] = old + eps
            up = loss()
            pf[idx] = old - eps
            down = loss()
            pf[idx] = old
            num = (up - down) / (2 * eps)
            ana = p.grad.ravel()[idx]
            worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-12))
    return worst


class TestConv2d:
    def test_identity_kernel(self):
        x = RNG.standard_normal((2, 3, 8, 8))
        conv = Conv2d(3, 3, 3, zero_init=True)
        for c in range(3):
            conv.weight.value[c, c, 1, 1] = 1.0
        y, _ = conv.forward(x)
        assert np.array_equal(y, x)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((2, 3, 8, 8))
        assert fd_gradcheck(Conv2d(3, 4, 3, rng=rng), x, seed) < 1e-5

    def test_linearity_bias_free(self):
        rng = np.random.default_rng(3)
        conv = Conv2d(2, 3, 3, rng=rng)
        conv.bias.value[...] = 0.0
        x = rng.standard_normal((1, 2, 8, 8))
        y1, _ = conv.forward(3.0 * x)
        y2, _ = conv.forward(x)
        assert np.allclose(y1, 3.0 * y2, atol=1e-12)

    def test_circular_padding_wraps(self):
        conv = Conv2d(1, 1, 3, zero_init=True)
        conv.weight.value[0, 0, 0, 0] = 1.0  # reads pixel up-left of center
        x = np.zeros((1, 1, 4, 4))
        x[0, 0, 0, 0] = 1.0
        y, _ = conv.forward(x)
        assert y[0, 0, 1, 1] == 1.0  # interior shift
        assert y[0, 0, 0, 0] == 0.0
        # wrap: output at (0,0) reads input at (-1,-1) == (3,3)
        x2 = np.zeros((1, 1, 4, 4))
        x2[0, 0, 3, 3] = 1.0
        y2, _ = conv.forward(x2)
        assert y2[0, 0, 0, 0] == 1.0

    def test_even_kernel_rejected(self):
        with pytest.raises(ValueError):
            Conv2d(1, 1, 2)


class TestSpectralConv2d:
    def test_zero_weights_gives_skip_path(self):
        rng = np.random.default_rng(4)
        layer = SpectralConv2d(3, 2, 2, rng=rng)
        layer.w_spec.value[...] = 0.0
        x = rng.standard_normal((1, 3, 8, 8))
        y, _ = layer.forward(x)
        skip = np.einsum("oi,nihw->nohw", layer.w_skip.value, x)
        skip += layer.bias.value[None, :, None, None]
        assert np.allclose(y, skip, atol=1e-14)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed + 10)
        x = rng.standard_normal((2, 3, 8, 8))
        assert fd_gradcheck(SpectralConv2d(3, 3, 2, rng=rng), x, seed) < 1e-5

    def test_band_limitation(self):
        rng = np.random.default_rng(5)
        m = 2
        layer = SpectralConv2d(2, 2, m, rng=rng)
        x = rng.standard_normal((1, 2, 16, 16))
        y, _ = layer.forward(x)
        skip = np.einsum("oi,nihw->nohw", layer.w_skip.value, x)
        skip += layer.bias.value[None, :, None, None]
        spectral_part = y - skip
        ft = np.fft.fft2(spectral_part[0], axes=(-2, -1))
        freq = np.fft.fftfreq(16) * 16
        outside = (np.abs(freq[:, None]) > m) | (np.abs(freq[None, :]) > m)
        assert np.max(np.abs(ft[:, outside])) < 1e-12

    def test_modes_too_large(self):
        layer = SpectralConv2d(1, 1, 5)
        with pytest.raises(ValueError):
            layer.forward(np.zeros((1, 1, 8, 8)))


class TestGelu:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed + 20)
        x = rng.standard_normal((2, 3, 6, 6))
        assert fd_gradcheck(Gelu(), x, seed) < 1e-6

    def test_known_values(self):
        g = Gelu()
        y, _ = g.forward(np.array([[[[0.0]]]]))
        assert y[0, 0, 0, 0] == 0.0
        y, _ = g.forward(np.array([[[[10.0]]]]))
        assert y[0, 0, 0, 0] == pytest.approx(10.0, abs=1e-6)


class TestComposition:
    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_stack_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed + 30)
        stack = Sequential([
            Conv2d(3, 5, 3, rng=rng),
            Gelu(),
            SpectralConv2d(5, 5, 2, rng=rng),
            Gelu(),
            Conv2d(5, 2, 1, rng=rng),
        ])
        x = rng.standard_normal((1, 3, 8, 8))
        assert fd_gradcheck(stack, x, seed, n_coords=10) < 1e-4

    def test_forward_deterministic(self):
        rng = np.random.default_rng(6)
        stack = Sequential([Conv2d(2, 4, 3, rng=rng), Gelu(), Conv2d(4, 2, 3, rng=rng)])
        x = rng.standard_normal((1, 2, 8, 8))
        y1, _ = stack.forward(x)
        y2, _ = stack.forward(x)
        assert np.array_equal(y1, y2)


class TestAdamW:
    def _param_layer(self, value):
        conv = Conv2d(1, 1, 1, zero_init=True)
        conv.weight.value[...] = value
        return conv

    def test_decay_only_when_zero_gradient(self):
        conv = self._param_layer(2.0)
        opt = AdamW(conv.params(), lr=0.1, weight_decay=0.01)
        zero_grads(conv.params())
        opt.step()
        assert conv.weight.value[0, 0, 0, 0] == pytest.approx(2.0 * (1 - 0.1 * 0.01), rel=1e-15)

    def test_no_decay_zero_gradient_is_identity(self):
        conv = self._param_layer(1.2345)
        before = conv.weight.value.copy()
        opt = AdamW(conv.params(), lr=0.1, weight_decay=0.0)
        zero_grads(conv.params())
        opt.step()
        assert np.array_equal(conv.weight.value, before)

    def test_constant_gradient_sign_limit(self):
        conv = self._param_layer(0.0)
        opt = AdamW(conv.params(), lr=1e-3, weight_decay=0.0)
        prev = 0.0
        for _ in range(300):
            zero_grads(conv.params())
            conv.weight.grad[...] = 0.37
            conv.bias.grad[...] = 0.0
            before = float(conv.weight.value[0, 0, 0, 0])
            opt.step()
            prev = before - float(conv.weight.value[0, 0, 0, 0])
        assert prev == pytest.approx(1e-3, rel=1e-3)  # step size -> lr * sign(g)

    def test_cosine_schedule_endpoints(self):
        assert cosine_lr(1.0, 0, 10) == pytest.approx(1.0)
        assert cosine_lr(1.0, 9, 10) == pytest.approx(0.0, abs=1e-12)


class TestClipGradNorm:
    def _with_grad(self, values):
        conv = Conv2d(1, 1, 1, zero_init=True)
        conv.weight.grad[...] = values[0]
        conv.bias.grad[...] = values[1]
        return conv

    def test_below_threshold_unchanged(self):
        conv = self._with_grad((0.3, 0.4))  # norm 0.5
        before = (conv.weight.grad.copy(), conv.bias.grad.copy())
        assert clip_grad_norm(conv.params(), 1.0) == 1.0
        assert np.array_equal(conv.weight.grad, before[0])
        assert np.array_equal(conv.bias.grad, before[1])

    def test_above_threshold_scaled_to_bound(self):
        conv = self._with_grad((1.2, 1.6))  # norm 2.0
        scale = clip_grad_norm(conv.params(), 1.0)
        assert scale == pytest.approx(0.5)
        assert global_grad_norm(conv.params()) == pytest.approx(1.0, abs=1e-12)

    def test_idempotent(self):
        conv = self._with_grad((1.2, 1.6))
        clip_grad_norm(conv.params(), 1.0)
        after_once = (conv.weight.grad.copy(), conv.bias.grad.copy())
        clip_grad_norm(conv.params(), 1.0)
        assert np.allclose(conv.weight.grad, after_once[0], atol=1e-15)
        assert np.allclose(conv.bias.grad, after_once[1], atol=1e-15)


class TestCheckpointFormat:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(7)
        named = {
            "layer.weight": rng.standard_normal((3, 2, 3, 3)),
            "layer.bias": rng.standard_normal(3),
            "spec.w": rng.standard_normal((2, 2, 4, 4, 2)),
        }
        path = tmp_path / "model.ckpt"
        save_tensors(path, named, {"kind": "test", "seed": 5, "step": 12})
        back, manifest = load_tensors(path)
        assert set(back) == set(named)
        for k in named:
            assert np.array_equal(back[k], named[k])
        assert manifest["kind"] == "test"
        assert manifest["step"] == "12"

    def test_checksum_detects_mutation(self):
        conv = Conv2d(2, 2, 3, rng=np.random.default_rng(8))
        before = param_checksum(conv.params())
        assert param_checksum(conv.params()) == before
        conv.weight.value[0, 0, 0, 0] += 1e-9
        assert param_checksum(conv.params()) != before
