"""Gradient and shape checks for the numpy array ops.

Every backward pass is validated against central finite differences computed
in float64 on a random scalar projection of the op output.  The projection
makes the check sensitive to every output element without looping over them.
"""

import numpy as np
import pytest

from petsynth.net import ops

EPS = 1e-5
TOL = 1e-6


def numeric_grad(f, x, eps=EPS):
    """Central-difference gradient of scalar f at x, elementwise."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f()
        flat[i] = orig - eps
        fm = f()
        flat[i] = orig
        gf[i] = (fp - fm) / (2 * eps)
    return g


def check_op(inputs, forward, backward, n_param_grads, seed=0):
    """Compare analytic grads of sum(out * r) with finite differences."""
    rng = np.random.default_rng(seed)
    out, cache = forward(*inputs)
    r = rng.standard_normal(out.shape)
    grads = backward(r, cache)
    if not isinstance(grads, tuple):
        grads = (grads,)
    assert len(grads) == n_param_grads
    for arg, analytic in zip(inputs, grads):
        fd = numeric_grad(lambda: float((forward(*inputs)[0] * r).sum()), arg)
        np.testing.assert_allclose(analytic, fd, rtol=1e-4, atol=TOL)


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(0).standard_normal((1, 5, 5, 1))
        w = np.zeros((3, 3, 1, 1))
        w[1, 1, 0, 0] = 1.0
        out, _ = ops.conv2d(x, w, np.zeros(1))
        np.testing.assert_allclose(out, x)

    def test_same_padding_shapes(self):
        x = np.zeros((2, 12, 10, 3))
        w = np.zeros((3, 3, 3, 7))
        assert ops.conv2d(x, w, np.zeros(7))[0].shape == (2, 12, 10, 7)
        assert ops.conv2d(x, w, np.zeros(7), stride=2)[0].shape == (2, 6, 5, 7)
        assert ops.conv2d(x, w, np.zeros(7), dilation=2)[0].shape == (2, 12, 10, 7)
        odd = np.zeros((2, 13, 9, 3))
        assert ops.conv2d(odd, w, np.zeros(7), stride=2)[0].shape == (2, 7, 5, 7)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError, match="channels"):
            ops.conv2d(np.zeros((1, 4, 4, 2)), np.zeros((3, 3, 3, 1)), np.zeros(1))

    @pytest.mark.parametrize("stride,dilation", [(1, 1), (2, 1), (1, 2), (1, 3), (2, 3)])
    def test_gradients(self, stride, dilation):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((2, 8, 7, 3))
        w = rng.standard_normal((3, 3, 3, 4)) * 0.3
        b = rng.standard_normal(4) * 0.1
        check_op(
            (x, w, b),
            lambda x, w, b: ops.conv2d(x, w, b, stride=stride, dilation=dilation),
            ops.conv2d_backward, 3)

    def test_seven_by_seven_gradients(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((1, 8, 8, 2))
        w = rng.standard_normal((7, 7, 2, 2)) * 0.1
        b = rng.standard_normal(2) * 0.1
        check_op((x, w, b), ops.conv2d, ops.conv2d_backward, 3)


class TestConvTranspose:
    def test_output_size_and_bilinear_identity(self):
        # A stride-2 bilinear kernel on a constant field stays constant in the
        # interior (partition-of-unity property of the tap weights).
        s = 2
        k = 2 * s
        w = np.zeros((k, k, 1, 1))
        centre = (k - 1) / 2.0
        for i in range(k):
            for j in range(k):
                w[i, j, 0, 0] = (1 - abs(i - centre) / s) * (1 - abs(j - centre) / s)
        x = np.ones((1, 5, 5, 1))
        out, _ = ops.conv2d_transpose(x, w, np.zeros(1), stride=s)
        assert out.shape == (1, 10, 10, 1)
        np.testing.assert_allclose(out[0, 2:-2, 2:-2, 0], 1.0, atol=1e-12)

    def test_stride_validation(self):
        with pytest.raises(ValueError, match="even"):
            ops.conv2d_transpose(np.zeros((1, 4, 4, 1)), np.zeros((6, 6, 1, 1)),
                                 np.zeros(1), stride=3)
        with pytest.raises(ValueError, match="kernel"):
            ops.conv2d_transpose(np.zeros((1, 4, 4, 1)), np.zeros((3, 3, 1, 1)),
                                 np.zeros(1), stride=2)

    @pytest.mark.parametrize("stride", [2, 4])
    def test_gradients(self, stride):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((2, 4, 3, 2))
        w = rng.standard_normal((2 * stride, 2 * stride, 2, 3)) * 0.2
        b = rng.standard_normal(3) * 0.1
        check_op((x, w, b),
                 lambda x, w, b: ops.conv2d_transpose(x, w, b, stride=stride),
                 ops.conv2d_transpose_backward, 3)


class TestMaxPool:
    def test_even_and_ceil_sizes(self):
        assert ops.maxpool2x2(np.zeros((1, 8, 6, 2)))[0].shape == (1, 4, 3, 2)
        assert ops.maxpool2x2(np.zeros((1, 7, 5, 2)))[0].shape == (1, 4, 3, 2)

    def test_values(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 4, 4, 1)
        out, _ = ops.maxpool2x2(x)
        np.testing.assert_array_equal(out[0, :, :, 0], [[5, 7], [13, 15]])

    def test_gradients_even(self):
        x = np.random.default_rng(3).standard_normal((2, 6, 6, 3))
        check_op((x,), ops.maxpool2x2, ops.maxpool2x2_backward, 1)

    def test_gradients_odd(self):
        x = np.random.default_rng(4).standard_normal((2, 5, 7, 2))
        check_op((x,), ops.maxpool2x2, ops.maxpool2x2_backward, 1)


class TestUpsampleAndMerge:
    def test_upsample_values(self):
        x = np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 2, 2, 1)
        out, _ = ops.upsample_nn2x(x)
        np.testing.assert_array_equal(out[0, :, :, 0],
                                      [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]])

    def test_upsample_gradients(self):
        x = np.random.default_rng(5).standard_normal((2, 3, 4, 2))
        check_op((x,), ops.upsample_nn2x, ops.upsample_nn2x_backward, 1)

    def test_concat_crops_to_min(self):
        a = np.zeros((1, 5, 5, 2))
        b = np.zeros((1, 4, 6, 3))
        out, _ = ops.concat_channels(a, b)
        assert out.shape == (1, 4, 5, 5)

    def test_concat_gradients(self):
        rng = np.random.default_rng(6)
        a = rng.standard_normal((2, 5, 4, 2))
        b = rng.standard_normal((2, 4, 4, 3))
        check_op((a, b), ops.concat_channels, ops.concat_channels_backward, 2)

    def test_add_requires_equal_channels(self):
        with pytest.raises(ValueError, match="channel"):
            ops.add_fuse(np.zeros((1, 4, 4, 2)), np.zeros((1, 4, 4, 3)))

    def test_add_gradients_with_crop(self):
        rng = np.random.default_rng(12)
        a = rng.standard_normal((2, 6, 5, 3))
        b = rng.standard_normal((2, 5, 5, 3))
        check_op((a, b), ops.add_fuse, ops.add_fuse_backward, 2)


class TestDenseSoftmaxActivations:
    def test_dense_flattens(self):
        x = np.random.default_rng(1).standard_normal((3, 2, 2, 2))
        w = np.random.default_rng(2).standard_normal((8, 5))
        out, _ = ops.dense(x, w, np.zeros(5))
        assert out.shape == (3, 5)

    def test_dense_gradients(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal((3, 2, 3, 2))
        w = rng.standard_normal((12, 4)) * 0.3
        b = rng.standard_normal(4) * 0.1
        check_op((x, w, b), ops.dense, ops.dense_backward, 3)

    def test_dense_feature_mismatch(self):
        with pytest.raises(ValueError, match="features"):
            ops.dense(np.zeros((2, 3)), np.zeros((4, 2)), np.zeros(2))

    def test_softmax_rows_sum_to_one(self):
        x = np.random.default_rng(14).standard_normal((6, 2)) * 10
        p, _ = ops.softmax(x)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        assert p.min() > 0

    def test_softmax_gradients(self):
        x = np.random.default_rng(15).standard_normal((4, 3))
        check_op((x,), ops.softmax, ops.softmax_backward, 1)

    def test_relu_gradients(self):
        x = np.random.default_rng(16).standard_normal((3, 4, 4, 2))
        x[np.abs(x) < 0.05] = 0.5  # keep FD away from the kink
        check_op((x,), ops.relu, ops.relu_backward, 1)

    def test_leaky_relu_gradients(self):
        x = np.random.default_rng(17).standard_normal((3, 4, 4, 2))
        x[np.abs(x) < 0.05] = -0.5
        check_op((x,), ops.leaky_relu, ops.leaky_relu_backward, 1)

    def test_leaky_relu_slope(self):
        out, _ = ops.leaky_relu(np.array([-1.0, 2.0]))
        np.testing.assert_allclose(out, [-0.2, 2.0])
