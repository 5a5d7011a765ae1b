"""Forward-behavior tests for the tensor engine: shapes, identities,
closed-form values, and the naive-vs-GEMM convolution comparison."""

import numpy as np
import pytest

from b2bdet import tensor as T
from b2bdet.tensor import DimensionError, Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


class TestConv2d:
    def test_same_padding_shape(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 8, 8)).astype(np.float32))
        w = Tensor(rng.normal(size=(16, 3, 3, 3)).astype(np.float32))
        assert T.conv2d(x, w, stride=1, padding=1).shape == (1, 16, 8, 8)

    def test_identity_kernel_exact(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 9, 7)).astype(np.float32))
        w = np.zeros((3, 3, 1, 1), np.float32)
        for i in range(3):
            w[i, i, 0, 0] = 1.0
        y = T.conv2d(x, Tensor(w), Tensor(np.zeros(3, np.float32)))
        assert np.array_equal(y.data, x.data)

    def test_strided_output_dims(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 11, 11)).astype(np.float32))
        w = Tensor(rng.normal(size=(4, 2, 3, 3)).astype(np.float32))
        y = T.conv2d(x, w, stride=2, padding=1)
        assert y.shape == (1, 4, 6, 6)

    def test_channel_mismatch_raises(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 8, 8)).astype(np.float32))
        w = Tensor(rng.normal(size=(4, 2, 3, 3)).astype(np.float32))
        with pytest.raises(DimensionError, match="channels"):
            T.conv2d(x, w)

    def test_too_small_input_raises(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 2, 2)).astype(np.float32))
        w = Tensor(rng.normal(size=(4, 2, 5, 5)).astype(np.float32))
        with pytest.raises(DimensionError, match="non-positive"):
            T.conv2d(x, w)

    def test_naive_path_bitwise_on_exact_grid(self, rng):
        # values on the 1/16 integer grid keep every partial sum exactly
        # representable, so both summation orders give identical floats
        for stride, padding, k in [(1, 1, 3), (2, 1, 3), (1, 2, 5), (1, 0, 1)]:
            x = Tensor(rng.integers(-8, 9, (2, 3, 10, 10)).astype(np.float32) / 16)
            w = Tensor(rng.integers(-8, 9, (4, 3, k, k)).astype(np.float32) / 16)
            b = Tensor(rng.integers(-8, 9, 4).astype(np.float32) / 16)
            fast = T.conv2d(x, w, b, stride, padding)
            ref = T.conv2d_naive(x, w, b, stride, padding)
            assert np.array_equal(fast.data, ref.data)

    def test_naive_path_close_on_general_floats(self, rng):
        x = Tensor(rng.normal(size=(2, 4, 9, 9)).astype(np.float32))
        w = Tensor(rng.normal(size=(6, 4, 3, 3)).astype(np.float32))
        fast = T.conv2d(x, w, None, 1, 1)
        ref = T.conv2d_naive(x, w, None, 1, 1)
        np.testing.assert_allclose(fast.data, ref.data, rtol=1e-5, atol=1e-5)


class TestElementwise:
    def test_sigmoid_at_zero(self):
        assert T.sigmoid(Tensor([0.0])).item() == pytest.approx(0.5)

    def test_silu_at_zero(self):
        assert T.silu(Tensor([0.0])).item() == 0.0

    def test_leaky_relu_negative(self):
        assert T.leaky_relu(Tensor([-1.0]), 0.2).item() == pytest.approx(-0.2)

    def test_prelu_matches_leaky_for_fixed_slope(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)).astype(np.float32))
        alpha = Tensor(np.full(3, 0.2, np.float32))
        np.testing.assert_allclose(T.prelu(x, alpha).data,
                                   T.leaky_relu(x, 0.2).data, rtol=1e-6)

    def test_broadcast_add(self, rng):
        a = Tensor(rng.normal(size=(2, 3, 4, 4)).astype(np.float32))
        b = Tensor(rng.normal(size=(3, 1, 1)).astype(np.float32))
        assert (a + b).shape == (2, 3, 4, 4)

    def test_incompatible_shapes_raise(self):
        with pytest.raises(DimensionError, match="broadcast"):
            Tensor(np.zeros((2, 3))) + Tensor(np.zeros((2, 4)))


class TestSpatialOps:
    def test_pixel_shuffle_shape(self, rng):
        x = Tensor(rng.normal(size=(1, 12, 8, 8)).astype(np.float32))
        assert T.pixel_shuffle(x, 2).shape == (1, 3, 16, 16)

    def test_space_to_depth_shape(self, rng):
        x = Tensor(rng.normal(size=(1, 3, 64, 64)).astype(np.float32))
        assert T.space_to_depth(x, 2).shape == (1, 12, 32, 32)

    def test_space_to_depth_block_ordering(self):
        # 2x2 image, one channel: channels come out TL, TR, BL, BR
        x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]], np.float32))
        y = T.space_to_depth(x, 2)
        assert y.data.reshape(4).tolist() == [1.0, 2.0, 3.0, 4.0]

    def test_roundtrip_bitwise(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 32, 32)).astype(np.float32))
        rt = T.pixel_shuffle(T.space_to_depth(x, 2), 2)
        assert np.array_equal(rt.data, x.data)

    def test_roundtrip_other_direction(self, rng):
        x = Tensor(rng.normal(size=(1, 12, 8, 8)).astype(np.float32))
        rt = T.space_to_depth(T.pixel_shuffle(x, 2), 2)
        assert np.array_equal(rt.data, x.data)

    def test_divisibility_errors(self, rng):
        with pytest.raises(DimensionError):
            T.space_to_depth(Tensor(np.zeros((1, 3, 7, 8), np.float32)), 2)
        with pytest.raises(DimensionError):
            T.pixel_shuffle(Tensor(np.zeros((1, 6, 4, 4), np.float32)), 2)

    def test_maxpool_same_padding(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 8, 8)).astype(np.float32))
        assert T.maxpool2d(x, 5, 1, 2).shape == (1, 2, 8, 8)

    def test_maxpool_matches_manual(self, rng):
        x = Tensor(rng.normal(size=(1, 1, 4, 4)).astype(np.float32))
        y = T.maxpool2d(x, 2, 2, 0)
        manual = x.data.reshape(2, 2, 2, 2).transpose(0, 2, 1, 3).reshape(2, 2, 4).max(-1)
        np.testing.assert_array_equal(y.data[0, 0], manual)

    def test_upsample_nearest(self, rng):
        x = Tensor(rng.normal(size=(1, 2, 3, 3)).astype(np.float32))
        y = T.upsample_nearest(x, 2)
        assert y.shape == (1, 2, 6, 6)
        assert np.array_equal(y.data[:, :, ::2, ::2], x.data)


class TestNormalization:
    def test_softmax_rows_sum_to_one(self, rng):
        x = Tensor(rng.normal(size=(5, 9)).astype(np.float32) * 10)
        y = T.softmax(x, -1)
        np.testing.assert_allclose(y.data.sum(-1), np.ones(5), atol=1e-5)
        assert (y.data >= 0).all() and (y.data <= 1).all()

    def test_layernorm_zero_mean_unit_var(self, rng):
        x = Tensor(rng.normal(size=(4, 16)).astype(np.float32) * 3 + 1)
        y = T.layernorm(x, -1)
        np.testing.assert_allclose(y.data.mean(-1), 0, atol=1e-5)
        np.testing.assert_allclose(y.data.var(-1), 1, atol=1e-3)

    def test_batchnorm_constant_channel_near_zero(self):
        x = Tensor(np.full((2, 3, 4, 4), 7.0, np.float32))
        g = Tensor(np.ones(3, np.float32))
        b = Tensor(np.zeros(3, np.float32))
        y = T.batchnorm2d(x, g, b, np.zeros(3, np.float32), np.ones(3, np.float32),
                          training=True)
        assert np.abs(y.data).max() < 1e-4

    def test_batchnorm_beta_shifts_mean(self, rng):
        x = Tensor(rng.normal(size=(4, 3, 8, 8)).astype(np.float32))
        g = Tensor(np.ones(3, np.float32))
        b = Tensor(np.full(3, 5.0, np.float32))
        y = T.batchnorm2d(x, g, b, np.zeros(3, np.float32), np.ones(3, np.float32),
                          training=True)
        np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 5.0, atol=1e-4)

    def test_batchnorm_channel_mismatch(self, rng):
        x = Tensor(rng.normal(size=(2, 3, 4, 4)).astype(np.float32))
        g = Tensor(np.ones(4, np.float32))
        b = Tensor(np.zeros(3, np.float32))
        with pytest.raises(DimensionError):
            T.batchnorm2d(x, g, b, np.zeros(3, np.float32), np.ones(3, np.float32))

    def test_batchnorm_eval_uses_running_stats(self, rng):
        x = Tensor(rng.normal(size=(2, 2, 4, 4)).astype(np.float32))
        g = Tensor(np.ones(2, np.float32))
        b = Tensor(np.zeros(2, np.float32))
        rm = np.array([1.0, -1.0], np.float32)
        rv = np.array([4.0, 0.25], np.float32)
        y = T.batchnorm2d(x, g, b, rm, rv, training=False)
        expect = (x.data - rm[None, :, None, None]) / np.sqrt(rv + 1e-5)[None, :, None, None]
        np.testing.assert_allclose(y.data, expect, atol=1e-5)

    def test_bce_logit_zero_is_ln2(self):
        x = Tensor(np.zeros(8, np.float32))
        v = T.bce_with_logits(x, np.ones(8, np.float32)).item()
        assert v == pytest.approx(np.log(2.0), abs=1e-6)


class TestDeterminism:
    def test_ops_bitwise_repeatable(self, rng):
        x = rng.normal(size=(2, 8, 12, 12)).astype(np.float32)
        w = rng.normal(size=(8, 8, 3, 3)).astype(np.float32)
        a = T.conv2d(Tensor(x), Tensor(w), stride=1, padding=1).data
        b = T.conv2d(Tensor(x.copy()), Tensor(w.copy()), stride=1, padding=1).data
        assert np.array_equal(a, b)

    def test_outputs_finite(self, rng):
        x = Tensor(rng.normal(size=(2, 4, 8, 8)).astype(np.float32))
        w = Tensor(rng.normal(size=(4, 4, 3, 3)).astype(np.float32))
        y = T.silu(T.conv2d(x, w, stride=1, padding=1))
        assert np.isfinite(y.data).all()
