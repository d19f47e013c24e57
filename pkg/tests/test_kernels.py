import numpy as np
import pytest

from grrn.errors import ConfigError, ShapeError
from grrn.kernels import (
    ConvSpec,
    conv2d,
    conv2d_backward,
    conv3d,
    conv3d_backward,
    fully_connected,
    fully_connected_backward,
    global_avg_pool,
    global_avg_pool_backward,
)

from gradcheck import FLOOR32, check_grad, rel_err
from oracles import conv2d_direct, conv3d_direct, grouped_via_full_conv


def full_conv(x, w, b):
    spec = ConvSpec(x.shape[-1], w.shape[-1], w.shape[0], w.shape[1])
    return conv2d(x, spec, w, b)


class TestConv2dForward:
    def test_identity_kernel(self):
        x = np.array([[[5.0]]], dtype=np.float32)
        w = np.zeros((3, 3, 1, 1), dtype=np.float32)
        w[1, 1, 0, 0] = 1.0
        out = conv2d(x, ConvSpec(1, 1, 3, 3), w)
        assert out.shape == (1, 1, 1)
        assert out[0, 0, 0] == 5.0

    def test_constant_input_ones_kernel_corners(self):
        # 2x2 ones, 3x3 ones kernel, zero same-padding: each corner output
        # sees exactly the four input pixels.
        x = np.ones((2, 2, 1), dtype=np.float32)
        w = np.ones((3, 3, 1, 1), dtype=np.float32)
        out = conv2d(x, ConvSpec(1, 1, 3, 3), w)
        assert out.shape == (2, 2, 1)
        np.testing.assert_array_equal(out[..., 0], 4.0)

    def test_grouped_matches_blockdiag_oracle(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(5, 6, 4)).astype(np.float32)
        w = rng.normal(size=(3, 3, 2, 4)).astype(np.float32)
        b = rng.normal(size=4).astype(np.float32)
        got = conv2d(x, ConvSpec(4, 4, 3, 3, groups=2), w, b)
        want = grouped_via_full_conv(full_conv, x, w, b, groups=2)
        np.testing.assert_allclose(got, want, atol=1e-6)

    @pytest.mark.parametrize("g,cin,cout", [(1, 3, 5), (2, 4, 6), (3, 6, 3), (4, 8, 8)])
    def test_matches_direct_oracle(self, g, cin, cout):
        rng = np.random.default_rng(g * 100 + cin)
        x = rng.normal(size=(4, 5, cin)).astype(np.float32)
        w = rng.normal(size=(3, 3, cin // g, cout)).astype(np.float32)
        b = rng.normal(size=cout).astype(np.float32)
        got = conv2d(x, ConvSpec(cin, cout, 3, 3, groups=g), w, b)
        want = conv2d_direct(x, w, b, groups=g)
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)

    def test_valid_padding_shrinks(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(6, 7, 2)).astype(np.float32)
        w = rng.normal(size=(3, 3, 2, 3)).astype(np.float32)
        got = conv2d(x, ConvSpec(2, 3, 3, 3, padding="valid"), w)
        assert got.shape == (4, 5, 3)
        want = conv2d_direct(x, w, padding="valid")
        np.testing.assert_allclose(got, want, rtol=1e-5, atol=1e-5)

    def test_pointwise_is_channel_matmul(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(3, 3, 4)).astype(np.float32)
        w = rng.normal(size=(1, 1, 4, 2)).astype(np.float32)
        got = conv2d(x, ConvSpec(4, 2, 1, 1), w)
        np.testing.assert_allclose(got, x @ w[0, 0], rtol=1e-6)

    def test_linearity(self):
        rng = np.random.default_rng(2)
        spec = ConvSpec(3, 4, 3, 3)
        w = rng.normal(size=spec.weight_shape).astype(np.float32)
        x = rng.normal(size=(5, 5, 3)).astype(np.float32)
        y = rng.normal(size=(5, 5, 3)).astype(np.float32)
        lhs = conv2d(2.5 * x + 0.5 * y, spec, w)
        rhs = 2.5 * conv2d(x, spec, w) + 0.5 * conv2d(y, spec, w)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-5, atol=1e-5)

    def test_determinism(self):
        rng = np.random.default_rng(3)
        spec = ConvSpec(6, 6, 3, 3, groups=3)
        w = rng.normal(size=spec.weight_shape).astype(np.float32)
        x = rng.normal(size=(9, 8, 6)).astype(np.float32)
        a = conv2d(x, spec, w)
        b = conv2d(x, spec, w)
        assert a.tobytes() == b.tobytes()

    def test_batched_equals_per_sample(self):
        rng = np.random.default_rng(4)
        spec = ConvSpec(4, 4, 3, 3, groups=2)
        w = rng.normal(size=spec.weight_shape).astype(np.float32)
        xs = rng.normal(size=(3, 5, 5, 4)).astype(np.float32)
        batched = conv2d(xs, spec, w)
        for i in range(3):
            np.testing.assert_array_equal(batched[i], conv2d(xs[i], spec, w))

    def test_group_divisibility_rejected(self):
        with pytest.raises(ConfigError):
            ConvSpec(5, 4, 3, 3, groups=2)
        with pytest.raises(ConfigError):
            ConvSpec(4, 5, 3, 3, groups=2)

    def test_channel_mismatch_rejected(self):
        spec = ConvSpec(3, 4, 3, 3)
        w = np.zeros(spec.weight_shape, dtype=np.float32)
        with pytest.raises(ShapeError):
            conv2d(np.zeros((4, 4, 2), dtype=np.float32), spec, w)
        with pytest.raises(ShapeError):
            conv2d(np.zeros((4, 4, 3), dtype=np.float32), spec,
                   np.zeros((3, 3, 2, 4), dtype=np.float32))

    def test_grouped_equivalence_property(self):
        # For every g dividing the channel counts, grouped conv equals the
        # concatenation of g independent full convolutions.
        rng = np.random.default_rng(5)
        for g in (1, 2, 3, 6):
            x = rng.normal(size=(4, 4, 6)).astype(np.float32)
            w = rng.normal(size=(3, 3, 6 // g, 6)).astype(np.float32)
            got = conv2d(x, ConvSpec(6, 6, 3, 3, groups=g), w)
            want = grouped_via_full_conv(full_conv, x, w, None, groups=g)
            np.testing.assert_allclose(got, want, atol=1e-6)

    def test_weight_count_law(self):
        assert ConvSpec(6, 6, 3, 3, groups=1).weight_count == 9 * 36
        assert ConvSpec(6, 6, 3, 3, groups=3).weight_count == 9 * 12
        # depthwise: g = Cin = Cout
        assert ConvSpec(6, 6, 3, 3, groups=6).weight_count == 9 * 6


class TestConv3dForward:
    def test_temporal_shrink(self):
        x = np.zeros((4, 4, 7, 2), dtype=np.float32)
        w = np.zeros((3, 3, 3, 2, 5), dtype=np.float32)
        assert conv3d(x, w).shape == (4, 4, 5, 5)

    def test_all_ones_interior(self):
        x = np.ones((5, 5, 3, 1), dtype=np.float32)
        w = np.ones((3, 3, 3, 1, 1), dtype=np.float32)
        out = conv3d(x, w)
        assert out.shape == (5, 5, 1, 1)
        assert out[2, 2, 0, 0] == 27.0

    def test_center_tap_is_temporal_crop(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(4, 5, 5, 3)).astype(np.float32)
        w = np.zeros((3, 3, 3, 3, 3), dtype=np.float32)
        for c in range(3):
            w[1, 1, 1, c, c] = 1.0
        out = conv3d(x, w)
        np.testing.assert_allclose(out, x[:, :, 1:4, :], atol=1e-6)

    def test_matches_direct_oracle(self):
        rng = np.random.default_rng(9)
        x = rng.normal(size=(3, 4, 5, 2)).astype(np.float32)
        w = rng.normal(size=(3, 3, 3, 2, 3)).astype(np.float32)
        b = rng.normal(size=3).astype(np.float32)
        np.testing.assert_allclose(conv3d(x, w, b), conv3d_direct(x, w, b),
                                   rtol=1e-5, atol=1e-5)

    def test_kernel_longer_than_time_rejected(self):
        x = np.zeros((4, 4, 2, 1), dtype=np.float32)
        w = np.zeros((3, 3, 3, 1, 1), dtype=np.float32)
        with pytest.raises(ShapeError):
            conv3d(x, w)


class TestFullyConnected:
    def test_identity(self):
        x = np.array([3.0, -1.0, 2.0], dtype=np.float32)
        np.testing.assert_array_equal(
            fully_connected(x, np.eye(3, dtype=np.float32),
                            np.zeros(3, dtype=np.float32)), x)

    def test_hand_example(self):
        out = fully_connected(np.array([1.0, 2.0], dtype=np.float32),
                              np.eye(2, dtype=np.float32),
                              np.array([1.0, 1.0], dtype=np.float32))
        np.testing.assert_array_equal(out, [2.0, 3.0])

    def test_zero_weights_gives_bias(self):
        b = np.array([4.0, 5.0], dtype=np.float32)
        out = fully_connected(np.array([1.0, 2.0, 3.0], dtype=np.float32),
                              np.zeros((3, 2), dtype=np.float32), b)
        np.testing.assert_array_equal(out, b)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            fully_connected(np.zeros(3, dtype=np.float32),
                            np.zeros((4, 2), dtype=np.float32))


class TestGlobalAvgPool:
    def test_constant(self):
        x = np.full((4, 6, 3), 2.5, dtype=np.float32)
        np.testing.assert_allclose(global_avg_pool(x), [2.5, 2.5, 2.5])

    def test_hand_example(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]], dtype=np.float32)[..., None]
        np.testing.assert_allclose(global_avg_pool(x), [2.5])

    def test_permutation_invariance(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(3, 4, 2)).astype(np.float32)
        flat = x.reshape(-1, 2)
        perm = rng.permutation(flat.shape[0])
        y = flat[perm].reshape(3, 4, 2)
        np.testing.assert_allclose(global_avg_pool(x), global_avg_pool(y),
                                   rtol=1e-6)


class TestBackward:
    """Analytic gradients vs central finite differences."""

    def test_conv2d_grouped_float32(self):
        # the contract case: 4x4x2 input, g=2, 32-bit, rel err < 1e-2
        rng = np.random.default_rng(11)
        spec = ConvSpec(2, 2, 3, 3, groups=2)
        x = rng.normal(size=(4, 4, 2)).astype(np.float32)
        w = rng.normal(size=spec.weight_shape).astype(np.float32)
        b = rng.normal(size=2).astype(np.float32)
        gout = rng.normal(size=(4, 4, 2)).astype(np.float32)

        def loss():
            return float((conv2d(x, spec, w, b) * gout).sum())

        gx, gw, gb = conv2d_backward(x, spec, w, gout)
        check_grad(loss, x, gx, tol=1e-2, floor=FLOOR32)
        check_grad(loss, w, gw, tol=1e-2, floor=FLOOR32)
        check_grad(loss, b, gb, tol=1e-2, floor=FLOOR32)

    @pytest.mark.parametrize("trial", range(20))
    def test_conv2d_randomized_shapes_float64(self, trial):
        rng = np.random.default_rng(1000 + trial)
        g = int(rng.choice([1, 2, 3]))
        cin = g * int(rng.integers(1, 3))
        cout = g * int(rng.integers(1, 3))
        kh, kw = int(rng.choice([1, 2, 3])), int(rng.choice([1, 2, 3]))
        h = int(rng.integers(kh, kh + 3))
        w_ = int(rng.integers(kw, kw + 3))
        pad = "same" if rng.random() < 0.7 else "valid"
        spec = ConvSpec(cin, cout, kh, kw, groups=g, padding=pad)
        x = rng.normal(size=(h, w_, cin))
        w = rng.normal(size=spec.weight_shape)
        out = conv2d(x, spec, w)
        gout = rng.normal(size=out.shape)

        def loss():
            return float((conv2d(x, spec, w) * gout).sum())

        gx, gw, _ = conv2d_backward(x, spec, w, gout)
        check_grad(loss, x, gx, tol=1e-4)
        check_grad(loss, w, gw, tol=1e-4)

    @pytest.mark.parametrize("trial", range(20))
    def test_conv3d_randomized_shapes_float64(self, trial):
        rng = np.random.default_rng(2000 + trial)
        cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3))
        kt = int(rng.choice([1, 3]))
        t = int(rng.integers(kt, kt + 3))
        x = rng.normal(size=(3, 4, t, cin))
        w = rng.normal(size=(3, 3, kt, cin, cout))
        b = rng.normal(size=cout)
        out = conv3d(x, w, b)
        gout = rng.normal(size=out.shape)

        def loss():
            return float((conv3d(x, w, b) * gout).sum())

        gx, gw, gb = conv3d_backward(x, w, gout)
        check_grad(loss, x, gx, tol=1e-4)
        check_grad(loss, w, gw, tol=1e-4)
        check_grad(loss, b, gb, tol=1e-4)

    def test_fc_gradient_is_exact_transpose(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=6)
        w = rng.normal(size=(6, 4))
        gout = rng.normal(size=4)
        gx, gw, gb = fully_connected_backward(x, w, gout)
        assert rel_err(gx, gout @ w.T) < 1e-6
        assert rel_err(gw, np.outer(x, gout)) < 1e-6
        assert rel_err(gb, gout) < 1e-6

    @pytest.mark.parametrize("trial", range(20))
    def test_fc_randomized_float64(self, trial):
        rng = np.random.default_rng(3000 + trial)
        c, d = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        x = rng.normal(size=c)
        w = rng.normal(size=(c, d))
        b = rng.normal(size=d)
        gout = rng.normal(size=d)

        def loss():
            return float((fully_connected(x, w, b) * gout).sum())

        gx, gw, gb = fully_connected_backward(x, w, gout)
        check_grad(loss, x, gx, tol=1e-4)
        check_grad(loss, w, gw, tol=1e-4)
        check_grad(loss, b, gb, tol=1e-4)

    @pytest.mark.parametrize("trial", range(20))
    def test_pool_randomized_float64(self, trial):
        rng = np.random.default_rng(4000 + trial)
        h, w_, c = (int(rng.integers(1, 5)) for _ in range(3))
        x = rng.normal(size=(h, w_, c))
        gout = rng.normal(size=c)

        def loss():
            return float((global_avg_pool(x) * gout).sum())

        gx = global_avg_pool_backward(x, gout)
        check_grad(loss, x, gx, tol=1e-4)

    def test_zero_upstream_gives_zero_grads(self):
        rng = np.random.default_rng(13)
        spec = ConvSpec(2, 4, 3, 3)
        x = rng.normal(size=(4, 4, 2)).astype(np.float32)
        w = rng.normal(size=spec.weight_shape).astype(np.float32)
        gx, gw, gb = conv2d_backward(x, spec, w, np.zeros((4, 4, 4), np.float32))
        assert not gx.any() and not gw.any() and not gb.any()
