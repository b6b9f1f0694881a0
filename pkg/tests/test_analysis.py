import numpy as np
import pytest

from combnet import analysis, ops
from combnet.errors import GeometryError, ShapeError
from combnet.masking import MaskConfig

from reference import random_comb_instance


def comb_layer(c_in, c_out, k=3, stride=1, pad=None, interleave=True, phase=0,
               mode="comb", weights=None, rng=None):
    pad = k // 2 if pad is None else pad
    if weights is None:
        weights = (rng or np.random.default_rng(0)).standard_normal((c_out, c_in, k, k))
    return ops.CombConvLayer(
        weights=weights, stride=stride, pad=pad, mode=mode,
        mask_cfg=MaskConfig(interleave=interleave, layer_phase=phase, stride=stride,
                            pad=pad, kernel_size=k))


class TestCountMacs:
    def test_reference_32x32_64ch(self):
        # 3x3 comb layer, 64 -> 64 channels on a 32x32 grid (same padding)
        layer = comb_layer(64, 64)
        std, comb, removed = analysis.count_macs(layer, (64, 32, 32))
        assert std == 37_748_736
        assert comb == 18_939_904
        assert removed == 16_777_216
        assert comb / std == pytest.approx(0.5017361, abs=1e-6)

    def test_degenerate_k1_counts_exactly(self):
        # K=1, C_out=1: the closed-form ratio leaves its domain; exact counts
        # show comb costs more than standard here
        layer = comb_layer(1, 1, k=1, pad=0)
        std, comb, removed = analysis.count_macs(layer, (1, 8, 8))
        assert std == 64
        assert comb == 32 + 64  # half the conv sites plus the channel average
        assert removed == 0  # (K^2 - 1) = 0 connections per masked unit

    def test_standard_mode_columns_equal(self):
        layer = comb_layer(8, 8, mode="standard")
        std, comb, removed = analysis.count_macs(layer, (8, 16, 16))
        assert std == comb and removed == 0

    def test_odd_grid_resolves_by_actual_ones_count(self):
        layer = comb_layer(1, 1, pad=0, interleave=False)
        std, comb, _ = analysis.count_macs(layer, (1, 6, 6))
        # 4x4 output: 8 conv sites of 9 MACs + 16 channel-average MACs
        assert std == 16 * 9
        assert comb == 8 * 9 + 16

    def test_grouped_layer(self):
        layer = ops.CombConvLayer(
            weights=np.zeros((4, 1, 3, 3)), stride=1, pad=1, groups=4,
            mask_cfg=MaskConfig(stride=1, pad=1, kernel_size=3))
        std, comb, removed = analysis.count_macs(layer, (4, 8, 8))
        assert std == 64 * 9 * 1 * 4
        assert comb == 9 * 1 * (4 * 32) + 64 * 4

    def test_input_channel_mismatch(self):
        with pytest.raises(ShapeError):
            analysis.count_macs(comb_layer(4, 4), (8, 8, 8))


class TestReductionRatio:
    def test_k3_c64(self):
        assert analysis.reduction_ratio(3, 64) == pytest.approx(0.49826388, abs=1e-8)

    def test_k3_c1(self):
        assert analysis.reduction_ratio(3, 1) == pytest.approx(0.5 - 1 / 9, abs=1e-12)

    def test_limit_approaches_half(self):
        assert analysis.reduction_ratio(3, 1024) > 0.499

    def test_consistency_with_measured_counts_even_grid(self, rng):
        # on even grids every channel's mask is exactly half ones, so the
        # measured ratio lands inside the one-element slack
        for c_out in (3, 7, 16):
            layer = comb_layer(5, c_out, rng=rng)
            std, comb, _ = analysis.count_macs(layer, (5, 8, 8))
            slack = 1.0 / (64 * 9 * 5 * c_out) + 1e-12
            assert abs(comb / std + analysis.reduction_ratio(3, c_out) - 1.0) <= slack

    def test_consistency_with_measured_counts_odd_grid(self, rng):
        # odd grids round each channel's ones count by half an element, so
        # the deviation bound is 1/(2 H W) rather than the one-element slack
        for c_out in (3, 7, 16):
            layer = comb_layer(5, c_out, rng=rng)
            std, comb, _ = analysis.count_macs(layer, (5, 9, 9))
            dev = abs(comb / std + analysis.reduction_ratio(3, c_out) - 1.0)
            assert dev <= 1.0 / (2 * 81) + 1e-12


class TestSparseLowering:
    def test_reference_4x16_pattern(self):
        w = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
        layer = comb_layer(1, 1, pad=0, interleave=False, weights=w)
        sm = analysis.lower_to_sparse(layer, (1, 4, 4))
        assert (sm.rows, sm.cols) == (4, 16)
        dense = sm.to_dense()
        kern = w[0, 0].ravel()
        row0 = np.zeros(16)
        row0[[0, 1, 2, 4, 5, 6, 8, 9, 10]] = kern
        row3 = np.zeros(16)
        row3[[5, 6, 7, 9, 10, 11, 13, 14, 15]] = kern
        assert np.array_equal(dense[0], row0)
        assert np.array_equal(dense[3], row3)
        # masked rows carry a lone 1 at flattened columns 6 and 9
        assert dense[1, 6] == 1.0 and np.count_nonzero(dense[1]) == 1
        assert dense[2, 9] == 1.0 and np.count_nonzero(dense[2]) == 1

    def test_standard_mode_has_four_stencil_rows(self):
        w = np.arange(1.0, 10.0).reshape(1, 1, 3, 3)
        layer = comb_layer(1, 1, pad=0, mode="standard", weights=w)
        dense = analysis.lower_to_sparse(layer, (1, 4, 4)).to_dense()
        assert all(np.count_nonzero(dense[r]) == 9 for r in range(4))

    def test_spmv_equals_forward_exactly(self, rng):
        for _ in range(20):
            x, layer = random_comb_instance(rng)
            sm = analysis.lower_to_sparse(layer, x.shape[1:])
            for ni in range(x.shape[0]):
                got = sm.apply(x[ni].ravel())
                want = ops.comb_conv_forward(x[ni:ni + 1], layer).ravel()
                assert np.array_equal(got, want)

    def test_masked_rows_have_one_entry_per_channel(self, rng):
        layer = comb_layer(3, 2, rng=rng)
        sm = analysis.lower_to_sparse(layer, (3, 5, 5))
        by_row = {}
        for r, c, v in sm.entries:
            by_row.setdefault(r, []).append(v)
        inv_d = 1.0 / layer.uniform_divisor()
        mask = layer.mask(5, 5)[0]  # (2, 5, 5)
        for r in range(sm.rows):
            vals = by_row[r]
            assert vals, f"row {r} is empty"
            j, rem = divmod(r, 25)
            p, q = divmod(rem, 5)
            if mask[j, p, q] < 0.5:
                assert vals == [inv_d] * 3
            else:
                assert len(vals) >= 9  # interior stencil over 3 channels is 27

    def test_no_duplicate_coordinates(self, rng):
        x, layer = random_comb_instance(rng)
        sm = analysis.lower_to_sparse(layer, x.shape[1:])
        coords = [(r, c) for r, c, _ in sm.entries]
        assert len(coords) == len(set(coords))

    def test_triplet_serialization(self):
        sm = analysis.SparseMatrix(2, 3, [(0, 1, 0.5), (1, 2, 1.0)])
        text = sm.to_text()
        lines = text.splitlines()
        assert lines[0] == "2 3 2"
        assert lines[1].split() == ["0", "1", "0.5"]

    def test_grouped_rejected(self):
        layer = ops.CombConvLayer(weights=np.zeros((2, 1, 3, 3)), pad=1, groups=2,
                                  mask_cfg=MaskConfig(stride=1, pad=1, kernel_size=3))
        with pytest.raises(ShapeError):
            analysis.lower_to_sparse(layer, (2, 4, 4))


class TestReceptiveField:
    def test_single_standard_layer_center(self):
        layer = comb_layer(1, 1, mode="standard")
        rf = analysis.receptive_field([layer], (7, 7), (0, 3, 3))
        assert rf.input_coords == {(p, q) for p in (2, 3, 4) for q in (2, 3, 4)}

    def test_masked_unit_is_singleton(self):
        layer = comb_layer(1, 1, interleave=False, phase=0)
        rf = analysis.receptive_field([layer], (7, 7), (0, 2, 3))  # odd parity
        assert rf.input_coords == {(2, 3)}

    def test_two_layer_phase_alternating_matches_standard(self):
        comb = [comb_layer(2, 2, phase=0), comb_layer(2, 2, phase=1)]
        std = [comb_layer(2, 2, mode="standard"), comb_layer(2, 2, mode="standard")]
        for p, q in [(4, 4), (5, 4), (6, 3)]:
            if (p + q + 1) % 2 != 0:
                continue  # need a convolution site at the phase-1 top layer
            got = analysis.receptive_field(comb, (12, 12), (1, p, q))
            want = analysis.receptive_field(std, (12, 12), (1, p, q))
            assert got.input_coords == want.input_coords
            assert len(want.input_coords) == 25

    def test_monotone_under_stacking(self, rng):
        layers = [comb_layer(2, 2, phase=i % 2, rng=rng) for i in range(3)]
        shallow = analysis.receptive_field(layers[:2], (10, 10), (1, 5, 5))
        deep = analysis.receptive_field(layers, (10, 10), (2, 5, 5))
        assert shallow.input_coords <= deep.input_coords

    def test_pool_expands_by_window(self):
        layer = comb_layer(1, 1, mode="standard")
        rf = analysis.receptive_field([layer, "maxpool2x2"], (8, 8), (1, 1, 1))
        # pool unit (1,1) covers conv outputs {2,3}x{2,3}, stencils reach 1..4
        assert rf.input_coords == {(p, q) for p in range(1, 5) for q in range(1, 5)}

    def test_bounding_box(self):
        layer = comb_layer(1, 1, mode="standard")
        rf = analysis.receptive_field([layer], (7, 7), (0, 3, 3))
        assert rf.bounding_box() == (2, 2, 4, 4)

    def test_invalid_position_rejected(self):
        layer = comb_layer(1, 1)
        with pytest.raises(GeometryError):
            analysis.receptive_field([layer], (7, 7), (0, 9, 0))
        with pytest.raises(GeometryError):
            analysis.receptive_field([layer], (7, 7), (2, 0, 0))


class TestFlopReport:
    def test_csv_format(self):
        layer = comb_layer(2, 4)
        report = analysis.FlopReport.from_layers([("conv1", layer, (2, 8, 8))])
        report.add_fixed("fc", 128)
        lines = report.to_csv().splitlines()
        assert lines[0] == "layer,macs_standard,macs_comb,removed,ratio"
        assert lines[1].startswith("conv1,")
        assert lines[2].startswith("fc,128,128,0,")
        assert lines[3].startswith("total,")

    def test_ratio_in_open_interval_for_comb_layers(self, rng):
        # holds whenever K^2 * C_out > 2
        for c_out in (2, 8, 32):
            layer = comb_layer(4, c_out, rng=rng)
            report = analysis.FlopReport.from_layers([("c", layer, (4, 16, 16))])
            assert 0.0 < report.per_layer[0].reduction_ratio < 0.5

    def test_double_count_scale(self):
        layer = comb_layer(2, 4)
        report = analysis.FlopReport.from_layers([("conv1", layer, (2, 8, 8))])
        single = report.to_csv(scale=1).splitlines()[1].split(",")
        double = report.to_csv(scale=2).splitlines()[1].split(",")
        assert int(double[1]) == 2 * int(single[1])
