"""Codec graph contracts: motion, contexts, frame coding, streams."""

import numpy as np
import pytest

import ctxcodec.tensor as T
from ctxcodec import codec, harness
from ctxcodec.errors import ContractError, DimensionError, FormatError
from ctxcodec.model import CodecConfig, init_model
from ctxcodec.synthetic import SequenceSpec, gen_synthetic_sequence


@pytest.fixture(scope="module")
def model():
    return init_model(CodecConfig(), seed=11)


@pytest.fixture(scope="module")
def seq32():
    return gen_synthetic_sequence(SequenceSpec(width=32, height=32, frame_count=6), "translate", 5)


def _pair(rng, h=32, w=32):
    x0 = T.constant(rng.uniform(0, 1, (1, 3, h, w)).astype(np.float32))
    x1 = T.constant(np.clip(x0.data + rng.normal(0, 0.03, x0.shape).astype(np.float32), 0, 1))
    return x0, x1


class TestMotion:
    def test_zero_initialized_final_layer_gives_zero_flow(self, model, rng):
        x, _ = _pair(rng)
        flow = codec.estimate_motion(model, x, x)
        np.testing.assert_array_equal(flow.data, np.zeros_like(flow.data))

    def test_untrained_params_are_total(self, rng):
        model = init_model(CodecConfig(), seed=99)
        x0, x1 = _pair(rng)
        flow = codec.estimate_motion(model, x1, x0)
        assert np.all(np.isfinite(flow.data))
        fr = codec.forward_p_frame(model, x1, codec.code_iframe(model, x0)[0], 1.0, 1, "eval")
        assert np.all(np.isfinite(fr.x_hat.data))

    def test_eval_latents_are_integers(self, model, rng):
        x0, x1 = _pair(rng)
        ref, _ = codec.code_iframe(model, x0)
        fr = codec.forward_p_frame(model, x1, ref, 2.0, 1, "eval")
        np.testing.assert_array_equal(fr.coded.motion, np.round(fr.coded.motion))
        np.testing.assert_array_equal(fr.coded.ctx, np.round(fr.coded.ctx))

    def test_doubling_q_never_grows_latents(self, rng):
        """|round(y / 2q)| <= |round(y / q)| elementwise with half-away rounding."""
        y = rng.uniform(-40, 40, 4096)
        for q in (0.25, 0.5, 1.0, 2.0):
            small = T.round_half_away(y / q)
            big = T.round_half_away(y / (2 * q))
            assert np.all(np.abs(big) <= np.abs(small))
            assert np.abs(big).sum() <= np.abs(small).sum()

    def test_codec_level_q_doubling(self, model, rng):
        x0, x1 = _pair(rng)
        ref, _ = codec.code_iframe(model, x0)
        flow = codec.estimate_motion(model, x1, ref.x_hat)
        totals = []
        for shift in (0.0, np.log(2.0)):
            for i in range(4):
                model.params[f"q_motion_log.{i}"].data += shift
            _, _, coded = codec.code_motion(model, flow, 1.0, "eval")
            totals.append(np.abs(coded["ints"]).sum())
        for i in range(4):
            model.params[f"q_motion_log.{i}"].data -= np.log(2.0)
        assert totals[1] <= totals[0]


class TestContexts:
    def test_extent_pyramid(self, model, rng):
        f_prev = T.constant(rng.standard_normal((1, 16, 32, 32)).astype(np.float32))
        flow = T.constant(np.zeros((1, 2, 32, 32), dtype=np.float32))
        c0, c1, c2 = codec.mine_contexts(model, f_prev, flow, 1)
        assert c0.shape == (1, 16, 32, 32)
        assert c1.shape == (1, 32, 16, 16)
        assert c2.shape == (1, 64, 8, 8)

    def test_variants_differ(self, model, rng):
        f_prev = T.constant(rng.standard_normal((1, 16, 32, 32)).astype(np.float32))
        flow = T.constant(np.zeros((1, 2, 32, 32), dtype=np.float32))
        a = codec.mine_contexts(model, f_prev, flow, 0)[0]
        b = codec.mine_contexts(model, f_prev, flow, 1)[0]
        assert not np.array_equal(a.data, b.data)

    def test_invalid_variant(self, model, rng):
        f_prev = T.constant(rng.standard_normal((1, 16, 32, 32)).astype(np.float32))
        flow = T.constant(np.zeros((1, 2, 32, 32), dtype=np.float32))
        with pytest.raises(ContractError):
            codec.mine_contexts(model, f_prev, flow, 4)

    def test_zero_flow_identity_miner_aligns(self, rng):
        """With an identity first layer and zero flow, C0 correlates with the
        reference feature best at zero spatial offset."""
        model = init_model(CodecConfig(), seed=3)
        w = np.zeros((16, 16, 3, 3), dtype=np.float32)
        for c in range(16):
            w[c, c, 1, 1] = 1.0
        model.params["miner.first0.w"].data = w
        model.params["miner.first0.b"].data = np.zeros(16, dtype=np.float32)
        f_prev = T.constant(rng.standard_normal((1, 16, 32, 32)).astype(np.float32))
        flow = T.constant(np.zeros((1, 2, 32, 32), dtype=np.float32))
        c0 = codec.mine_contexts(model, f_prev, flow, 0)[0].data[0]
        ref = f_prev.data[0]

        def corr(shift):
            rolled = np.roll(ref, shift, axis=(1, 2))
            return float(np.sum(c0 * rolled))

        center = corr((0, 0))
        for shift in ((0, 1), (1, 0), (0, -1), (-1, 0), (2, 3)):
            assert center > corr(shift)


class TestFrameCoding:
    def test_reconstruction_in_unit_interval(self, model, rng):
        x0, x1 = _pair(rng)
        ref, _ = codec.code_iframe(model, x0)
        fr = codec.forward_p_frame(model, x1, ref, 0.0, 1, "eval")
        assert fr.x_hat.data.min() >= 0.0 and fr.x_hat.data.max() <= 1.0

    def test_random_latents_are_total(self, model, rng):
        x0, _ = _pair(rng)
        ref, _ = codec.code_iframe(model, x0)
        contexts = codec.mine_contexts(
            model, ref.f_hat, T.constant(np.zeros((1, 2, 32, 32), dtype=np.float32)), 1
        )
        y = T.constant(rng.integers(-50, 50, (1, 32, 2, 2)).astype(np.float32))
        x_hat, f_hat = codec.decode_frame(model, y, contexts, ref.x_hat)
        assert np.all(np.isfinite(x_hat.data)) and np.all(np.isfinite(f_hat.data))

    def test_eval_determinism(self, model, rng):
        x0, x1 = _pair(rng)
        ref, _ = codec.code_iframe(model, x0)
        a = codec.forward_p_frame(model, x1, ref, 1.0, 1, "eval")
        b = codec.forward_p_frame(model, x1, ref, 1.0, 1, "eval")
        np.testing.assert_array_equal(a.x_hat.data, b.x_hat.data)
        np.testing.assert_array_equal(a.coded.ctx, b.coded.ctx)

    def test_distortions_nonnegative(self, model, rng):
        x0, x1 = _pair(rng)
        ref, _ = codec.code_iframe(model, x0)
        fr = codec.forward_p_frame(model, x1, ref, 3.0, 1, "eval")
        assert fr.d_me.item() >= 0.0 and fr.d_rec.item() >= 0.0
        assert fr.coded.bits_me >= 0.0 and fr.coded.bits_rec >= 0.0

    def test_stale_reference_rejected(self, model, rng):
        x0, x1 = _pair(rng)
        ref, _ = codec.code_iframe(model, x0)
        fr = codec.forward_p_frame(model, x1, ref, 1.0, 1, "eval")
        stale = codec.next_reference(fr, 1)
        with pytest.raises(ContractError):
            codec.forward_p_frame(model, x1, stale, 1.0, 3, "eval")
        with pytest.raises(ContractError):
            codec.forward_p_frame(model, x1, ref, 1.0, 0, "eval")

    def test_extent_contract(self, model, rng):
        for h, w in ((16, 16), (16, 48), (64, 32)):
            x = T.constant(rng.uniform(0, 1, (1, 3, h, w)).astype(np.float32))
            ref, _ = codec.code_iframe(model, x)
            fr = codec.forward_p_frame(model, x, ref, 1.0, 1, "eval")
            assert fr.x_hat.shape == (1, 3, h, w)
        bad = T.constant(rng.uniform(0, 1, (1, 3, 20, 32)).astype(np.float32))
        ref, _ = codec.code_iframe(model, T.constant(rng.uniform(0, 1, (1, 3, 20, 32)).astype(np.float32)))
        with pytest.raises(DimensionError):
            codec.forward_p_frame(model, bad, ref, 1.0, 1, "eval")

    def test_train_mode_needs_rng(self, model, rng):
        x0, x1 = _pair(rng)
        ref, _ = codec.code_iframe(model, x0)
        with pytest.raises(ContractError):
            codec.forward_p_frame(model, x1, ref, 1.0, 1, "train", rng=None)

    def test_interp_log_q_geometric(self, model):
        lo = codec.interp_log_q(model, "ctx", 1.0).item()
        hi = codec.interp_log_q(model, "ctx", 2.0).item()
        mid = codec.interp_log_q(model, "ctx", 1.5).item()
        assert mid == pytest.approx(0.5 * (lo + hi), rel=1e-6)
        with pytest.raises(ContractError):
            codec.interp_log_q(model, "ctx", 3.5)


class TestSequenceCoding:
    def test_stream_decode_matches_encoder_recon(self, model, seq32):
        res = harness.encode_sequence(model, seq32, 2.0, intra_period=-1)
        decoded = harness.decode_sequence(model, res.stream)
        np.testing.assert_array_equal(res.recon, decoded)

    def test_intra_period_layout_and_bits(self, model, seq32):
        res = harness.encode_sequence(model, seq32, 1.0, intra_period=3)
        kinds = [s.kind for s in res.stats]
        assert kinds == ["I", "P", "P", "I", "P", "P"]
        for s in res.stats:
            if s.kind == "I":
                assert s.bits == 24 * 32 * 32

    def test_bpp_accounting_exact(self, model, seq32):
        res = harness.encode_sequence(model, seq32, 0.0, intra_period=32)
        assert res.bpp(32, 32) * 32 * 32 * len(seq32) == res.total_bits

    def test_fractional_position_round_trips(self, model, seq32):
        res = harness.encode_sequence(model, seq32[:3], 1.5, intra_period=-1)
        decoded = harness.decode_sequence(model, res.stream)
        np.testing.assert_array_equal(res.recon, decoded)

    def test_header_q_position_validated(self, model, seq32):
        res = harness.encode_sequence(model, seq32[:2], 1.0, intra_period=-1)
        corrupted = bytearray(res.stream)
        corrupted[11:15] = np.float32(7.5).tobytes()  # in-header q position
        with pytest.raises(FormatError):
            harness.decode_sequence(model, bytes(corrupted))

    def test_first_frame_lossless(self, model, seq32):
        res = harness.encode_sequence(model, seq32, 3.0, intra_period=-1)
        assert res.stats[0].psnr == 100.0
        np.testing.assert_array_equal(res.recon[0], seq32[0])
