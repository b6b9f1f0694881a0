import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from combnet import ops
from combnet.errors import ConfigError, GeometryError, LabelError, ShapeError
from combnet.masking import MaskConfig

from reference import brute_comb, brute_conv2d, random_comb_instance


def plain_cfg(stride=1, pad=0, k=3, interleave=False, phase=0):
    return MaskConfig(interleave=interleave, layer_phase=phase, stride=stride,
                      pad=pad, kernel_size=k)


class TestConv2dStandard:
    def test_all_ones_valid(self):
        y = ops.conv2d_standard(np.ones((1, 1, 4, 4)), np.ones((1, 1, 3, 3)))
        assert np.array_equal(y[0, 0], np.full((2, 2), 9.0))

    def test_identity_kernel_same_padding(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        k = np.zeros((3, 3, 3, 3))
        for c in range(3):
            k[c, c, 1, 1] = 1.0
        assert np.array_equal(ops.conv2d_standard(x, k, pad=1), x)

    def test_1x1_kernel_scales(self, rng):
        x = rng.standard_normal((1, 1, 3, 3))
        y = ops.conv2d_standard(x, np.full((1, 1, 1, 1), 2.0))
        assert np.array_equal(y, 2.0 * x)

    def test_channel_mismatch(self, rng):
        with pytest.raises(ShapeError):
            ops.conv2d_standard(rng.standard_normal((1, 2, 4, 4)),
                                rng.standard_normal((1, 3, 3, 3)))

    def test_empty_output_geometry(self, rng):
        with pytest.raises(GeometryError):
            ops.conv2d_standard(rng.standard_normal((1, 1, 2, 2)),
                                rng.standard_normal((1, 1, 3, 3)))

    def test_matches_brute_force(self, rng):
        for groups in (1, 2):
            x = rng.standard_normal((2, 4, 6, 5))
            w = rng.standard_normal((6, 4 // groups, 3, 3))
            got = ops.conv2d_standard(x, w, stride=2, pad=1, groups=groups)
            assert np.array_equal(got, brute_conv2d(x, w, 2, 1, groups))


class TestUniformMap:
    def test_two_channel_average(self):
        x = np.zeros((1, 2, 1, 1))
        x[0, 0] = 2.0
        x[0, 1] = 4.0
        m = ops.uniform_map(x, c_out=2)
        assert m[0, 0, 0, 0] == 3.0

    def test_single_channel_identity(self, rng):
        x = rng.standard_normal((2, 1, 3, 3))
        assert np.array_equal(ops.uniform_map(x, c_out=1), x)

    def test_zero_input(self):
        assert np.array_equal(ops.uniform_map(np.zeros((1, 3, 2, 2)), 4),
                              np.zeros((1, 1, 2, 2)))

    def test_zero_divisor_rejected(self):
        with pytest.raises(ConfigError):
            ops.uniform_map(np.ones((1, 2, 2, 2)), 0)

    def test_by_c_in_divisor(self):
        x = np.ones((1, 4, 1, 1))
        assert ops.uniform_map(x, c_out=8, norm="by_C_in")[0, 0, 0, 0] == 1.0
        assert ops.uniform_map(x, c_out=8, norm="by_C_out")[0, 0, 0, 0] == 0.5


class TestCombForward:
    def test_ones_4x4_checkerboard_of_9_and_1(self):
        layer = ops.CombConvLayer(weights=np.ones((1, 1, 3, 3)), mask_cfg=plain_cfg())
        y = ops.comb_conv_forward(np.ones((1, 1, 4, 4)), layer)
        assert np.array_equal(y[0, 0], [[9.0, 1.0], [1.0, 9.0]])

    def test_single_channel_masked_sites_reproduce_input(self, rng):
        x = rng.standard_normal((1, 1, 6, 6))
        layer = ops.CombConvLayer(weights=rng.standard_normal((1, 1, 3, 3)),
                                  pad=1, mask_cfg=plain_cfg(pad=1))
        y = ops.comb_conv_forward(x, layer)
        mask = layer.mask(6, 6)[0, 0] >= 0.5
        assert np.array_equal(y[0, 0][~mask], x[0, 0][~mask])

    def test_standard_mode_equals_conv(self, rng):
        x = rng.standard_normal((2, 3, 5, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        layer = ops.CombConvLayer(weights=w, pad=1, mode="standard",
                                  mask_cfg=plain_cfg(pad=1, interleave=True, phase=1))
        assert np.array_equal(ops.comb_conv_forward(x, layer),
                              ops.conv2d_standard(x, w, pad=1))

    def test_matches_dense_reference_bitwise(self, rng):
        for _ in range(30):
            x, layer = random_comb_instance(rng, groups_allowed=True)
            assert np.array_equal(ops.comb_conv_forward(x, layer),
                                  ops.comb_dense_reference(x, layer))

    def test_matches_brute_oracle(self, rng):
        for _ in range(10):
            x, layer = random_comb_instance(rng, groups_allowed=True)
            got = ops.comb_conv_forward(x, layer)
            np.testing.assert_allclose(got, brute_comb(x, layer), rtol=0, atol=1e-12)

    def test_single_channel_grouped_variant(self, rng):
        # groups = C_in = C_out: the uniform branch degenerates to identity
        x = rng.standard_normal((1, 4, 6, 6))
        layer = ops.CombConvLayer(weights=rng.standard_normal((4, 1, 3, 3)),
                                  pad=1, groups=4, mask_cfg=plain_cfg(pad=1))
        y = ops.comb_conv_forward(x, layer)
        mask = layer.mask(6, 6)[0, 0] >= 0.5
        for c in range(4):
            assert np.array_equal(y[0, c][~mask], x[0, c][~mask])

    def test_degenerate_1x1_grid(self, rng):
        # same-pad layer on a 1x1 map: interleaved odd channels have no
        # convolution sites at all and fall back to the channel average
        x = rng.standard_normal((2, 2, 1, 1))
        layer = ops.CombConvLayer(weights=rng.standard_normal((2, 2, 3, 3)),
                                  pad=1, mask_cfg=plain_cfg(pad=1, interleave=True))
        y = ops.comb_conv_forward(x, layer)
        assert np.array_equal(y, ops.comb_dense_reference(x, layer))
        # channel 1 (phase 1) is a uniform site at (0,0): mean of inputs / 2
        assert y[0, 1, 0, 0] == pytest.approx(x[0, :, 0, 0].sum() / 2, abs=1e-15)

    def test_support_disjointness(self, rng):
        # values outside the stencil of a conv site never affect it
        x = rng.standard_normal((1, 2, 6, 6))
        layer = ops.CombConvLayer(weights=rng.standard_normal((2, 2, 3, 3)),
                                  mask_cfg=plain_cfg())
        base = ops.comb_conv_forward(x, layer)[0, 0, 0, 0]  # stencil rows/cols 0..2
        x2 = x.copy()
        x2[:, :, 4:, :] += 5.0
        x2[:, :, :, 4:] -= 3.0
        assert ops.comb_conv_forward(x2, layer)[0, 0, 0, 0] == base

    @given(st.integers(0, 4), st.integers(0, 4), st.integers(0, 5), st.integers(0, 5),
           st.integers(0, 1), st.booleans())
    @settings(max_examples=40, deadline=None)
    def test_support_disjointness_property(self, p, q, dp, dq, phase, interleave):
        # perturbing one input pixel changes output (p, q) only if that pixel
        # is inside the unit's stencil (conv site) or is its source (masked)
        rng = np.random.default_rng(p * 101 + q * 17 + dp * 5 + dq + phase)
        x = rng.standard_normal((1, 2, 6, 6))
        layer = ops.CombConvLayer(
            weights=rng.standard_normal((2, 2, 3, 3)), pad=1,
            mask_cfg=plain_cfg(pad=1, phase=phase, interleave=interleave))
        base = ops.comb_conv_forward(x, layer)
        x2 = x.copy()
        x2[0, 1, dp, dq] += 1.0
        out = ops.comb_conv_forward(x2, layer)
        for j in range(2):
            changed = out[0, j, p, q] != base[0, j, p, q]
            if layer.mask(6, 6)[0, j, p, q] >= 0.5:
                inside = abs(dp - p) <= 1 and abs(dq - q) <= 1
            else:
                inside = (dp, dq) == (p, q)  # same-pad source is the unit itself
            assert not changed or inside


class TestCombBackward:
    def test_zero_grad_gives_zero(self, rng):
        x, layer = random_comb_instance(rng)
        y = ops.comb_conv_forward(x, layer)
        gx, gw = ops.comb_conv_backward(x, layer, np.zeros_like(y))
        assert not gx.any() and not gw.any()

    def test_masked_site_routes_identity_gradient(self):
        # C_in = C_out = 1: gradient at a masked site lands untouched on the
        # source coordinate, and the weights receive nothing
        layer = ops.CombConvLayer(weights=np.ones((1, 1, 3, 3)), mask_cfg=plain_cfg())
        x = np.ones((1, 1, 4, 4))
        go = np.zeros((1, 1, 2, 2))
        go[0, 0, 0, 1] = 3.5  # (0,1) is a masked site; source is (1,2)
        gx, gw = ops.comb_conv_backward(x, layer, go)
        assert not gw.any()
        expected = np.zeros((1, 1, 4, 4))
        expected[0, 0, 1, 2] = 3.5
        assert np.array_equal(gx, expected)

    def test_grad_out_shape_checked(self, rng):
        x, layer = random_comb_instance(rng)
        y = ops.comb_conv_forward(x, layer)
        with pytest.raises(ShapeError):
            ops.comb_conv_backward(x, layer, y[:, :, :-1])


class TestBatchNorm:
    def test_standardized_input_passthrough(self, rng):
        x = rng.standard_normal((8, 3, 6, 6))
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        st = ops.BNState.create(3, eps=1e-8)
        y, _ = ops.batchnorm_forward(x, st, training=True)
        np.testing.assert_allclose(y, x, atol=1e-6)

    def test_beta_sets_channel_mean(self, rng):
        x = rng.standard_normal((4, 2, 5, 5)) * 3 + 1
        st = ops.BNState.create(2)
        st.beta = np.array([5.0, -2.0])
        y, _ = ops.batchnorm_forward(x, st, training=True)
        np.testing.assert_allclose(y.mean(axis=(0, 2, 3)), [5.0, -2.0], atol=1e-12)

    def test_eval_uses_running_stats(self, rng):
        x = rng.standard_normal((4, 2, 3, 3))
        st = ops.BNState.create(2)
        st.running_mean = np.array([1.0, -1.0])
        st.running_var = np.array([4.0, 0.25])
        y, _ = ops.batchnorm_forward(x, st, training=False)
        expected = (x - st.running_mean.reshape(1, 2, 1, 1)) / np.sqrt(
            st.running_var.reshape(1, 2, 1, 1) + st.eps)
        np.testing.assert_allclose(y, expected, atol=1e-12)

    def test_running_stats_updated_in_training(self, rng):
        x = rng.standard_normal((16, 1, 4, 4)) + 10.0
        st = ops.BNState.create(1, momentum=0.5)
        ops.batchnorm_forward(x, st, training=True)
        assert st.running_mean[0] == pytest.approx(0.5 * x.mean(), rel=1e-12)

    def test_empty_batch_rejected(self):
        with pytest.raises(ShapeError):
            ops.batchnorm_forward(np.zeros((0, 2, 3, 3)), ops.BNState.create(2), True)

    def test_channel_count_checked(self, rng):
        with pytest.raises(ShapeError):
            ops.batchnorm_forward(rng.standard_normal((2, 3, 4, 4)),
                                  ops.BNState.create(2), True)


class TestHeads:
    def test_relu_values(self):
        assert ops.relu(np.array(-1.0)) == 0.0
        assert ops.relu(np.array(2.0)) == 2.0

    def test_uniform_logits_loss_is_log_c(self):
        for c in (2, 10):
            loss, _ = ops.softmax_cross_entropy(np.zeros((3, c)), np.zeros(3, dtype=int))
            assert loss == pytest.approx(np.log(c), rel=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(LabelError):
            ops.softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))

    def test_maxpool_known_values(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        y, _ = ops.maxpool2x2(x)
        assert np.array_equal(y[0, 0], [[5, 7], [13, 15]])

    def test_maxpool_backward_routes_to_argmax(self):
        x = np.arange(16.0).reshape(1, 1, 4, 4)
        y, cache = ops.maxpool2x2(x)
        gx = ops.maxpool2x2_backward(np.ones_like(y), cache)
        expected = np.zeros_like(x)
        expected[0, 0, [1, 1, 3, 3], [1, 3, 1, 3]] = 1.0
        assert np.array_equal(gx, expected)

    def test_avgpool_global(self, rng):
        x = rng.standard_normal((2, 3, 4, 4))
        y, _ = ops.avgpool_global(x)
        np.testing.assert_allclose(y, x.mean(axis=(2, 3)), atol=1e-15)

    def test_linear_shape_checked(self, rng):
        with pytest.raises(ShapeError):
            ops.linear(rng.standard_normal((2, 3)), rng.standard_normal((4, 5)),
                       np.zeros(5))
