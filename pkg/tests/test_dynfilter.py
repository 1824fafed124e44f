"""Per-position dynamic filter generation and spatially variant filtering."""

import numpy as np
import pytest

import ctxcodec.tensor as T
from ctxcodec.dynfilter import FilterBank, delta_bank, generate_filters, svf_apply
from ctxcodec.errors import ContractError, DimensionError
from oracles import conv2d_ref, svf_ref


class TestGenerateFilters:
    def test_zero_params_zero_output(self, rng):
        ref = T.constant(rng.uniform(0, 1, (1, 3, 6, 6)))
        w = T.constant(np.zeros((9, 3, 3, 3)))
        b = T.constant(np.zeros(9))
        bank = generate_filters(ref, w, b, stride=1)
        feat = T.constant(rng.standard_normal((1, 4, 6, 6)))
        out = svf_apply(feat, bank)
        np.testing.assert_array_equal(out.data, np.zeros_like(feat.data))

    def test_center_bias_is_identity(self, rng):
        ref = T.constant(rng.uniform(0, 1, (1, 3, 6, 6)))
        w = T.constant(np.zeros((9, 3, 3, 3)))
        bias = np.zeros(9)
        bias[4] = 1.0  # center tap of a 3x3 filter
        bank = generate_filters(ref, w, T.constant(bias), stride=1)
        feat = T.constant(rng.standard_normal((1, 4, 6, 6)))
        out = svf_apply(feat, bank)
        np.testing.assert_allclose(out.data, feat.data, atol=1e-6)

    def test_stride2_matches_conv_reshape_oracle(self, rng64):
        with T.precision("float64"):
            ref = T.constant(rng64.uniform(0, 1, (1, 3, 8, 8)))
            w = T.constant(rng64.standard_normal((9, 3, 3, 3)))
            b = T.constant(rng64.standard_normal(9))
            bank = generate_filters(ref, w, b, stride=2)
        assert bank.spatial == (4, 4)
        ref_out = conv2d_ref(ref.data, w.data, b.data, stride=2, pad=1)
        assert np.abs(bank.taps.data - ref_out).max() < 1e-12
        grid = bank.as_grid()
        assert grid.shape == (4, 4, 3, 3)
        np.testing.assert_allclose(grid[2, 3, 1, 0], ref_out[0, 1 * 3 + 0, 2, 3])

    def test_bad_stride_rejected(self, rng):
        ref = T.constant(rng.uniform(0, 1, (1, 3, 4, 4)))
        with pytest.raises(ContractError):
            generate_filters(ref, T.constant(np.zeros((9, 3, 3, 3))), T.constant(np.zeros(9)), stride=3)


class TestSvfApply:
    def test_delta_bank_identity_exact(self, rng):
        feat = T.constant(rng.standard_normal((2, 3, 5, 5)).astype(np.float32))
        out = svf_apply(feat, delta_bank(2, 5, 5, dtype=np.float32))
        np.testing.assert_array_equal(out.data, feat.data)

    def test_uniform_bank_on_constant(self):
        h = w = 6
        feat = T.constant(np.full((1, 2, h, w), 3.0))
        taps = T.constant(np.full((1, 9, h, w), 1.0 / 9.0))
        out = svf_apply(feat, FilterBank(taps=taps, k=3)).data
        np.testing.assert_allclose(out[0, :, 1:-1, 1:-1], 3.0, atol=1e-6)
        # border rows lose the zero-padded taps: corners keep 4/9, edges 6/9
        np.testing.assert_allclose(out[0, 0, 0, 0], 3.0 * 4 / 9, atol=1e-6)
        np.testing.assert_allclose(out[0, 0, 0, 2], 3.0 * 6 / 9, atol=1e-6)

    def test_matches_brute_force_oracle(self, rng64):
        with T.precision("float64"):
            feat = T.constant(rng64.standard_normal((1, 2, 5, 5)))
            taps = T.constant(rng64.standard_normal((1, 9, 5, 5)))
            out = svf_apply(feat, FilterBank(taps=taps, k=3))
        ref = svf_ref(feat.data, taps.data, 3)
        assert np.abs(out.data - ref).max() < 1e-12

    def test_linearity_in_feature(self, rng64):
        with T.precision("float64"):
            fa = rng64.standard_normal((1, 2, 5, 5))
            fb = rng64.standard_normal((1, 2, 5, 5))
            bank = FilterBank(taps=T.constant(rng64.standard_normal((1, 9, 5, 5))), k=3)
            a, b = 1.7, -0.4
            lhs = svf_apply(T.constant(a * fa + b * fb), bank).data
            rhs = a * svf_apply(T.constant(fa), bank).data + b * svf_apply(T.constant(fb), bank).data
            assert np.abs(lhs - rhs).max() < 1e-10

    def test_channel_sharing_commutes_with_permutation(self, rng64):
        with T.precision("float64"):
            feat = rng64.standard_normal((1, 4, 5, 5))
            bank = FilterBank(taps=T.constant(rng64.standard_normal((1, 9, 5, 5))), k=3)
            perm = [2, 0, 3, 1]
            direct = svf_apply(T.constant(feat[:, perm]), bank).data
            permuted = svf_apply(T.constant(feat), bank).data[:, perm]
            np.testing.assert_array_equal(direct, permuted)

    def test_extent_mismatch_rejected(self, rng):
        feat = T.constant(rng.standard_normal((1, 2, 5, 5)))
        with pytest.raises(DimensionError):
            svf_apply(feat, delta_bank(1, 4, 4))
