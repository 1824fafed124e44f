"""Losses, hierarchical weights, optimizer, schedule semantics."""

import numpy as np
import pytest

import ctxcodec.tensor as T
from ctxcodec import codec, training
from ctxcodec.codec import FrameResult
from ctxcodec.errors import ContractError
from ctxcodec.model import CodecConfig, init_model, load_checkpoint, save_checkpoint
from ctxcodec.synthetic import default_corpus
from ctxcodec.training import (
    AdamW, ScheduleStage, adamw_step, default_schedule, hierarchical_weight,
    loss_all, loss_cascade, loss_me_d, loss_me_rd, loss_rec_d, loss_rec_rd,
    loss_repeat_long, run_schedule,
)


def _stub_result(rng=None, d_me=None, d_rec=None, bpp_me=None, bpp_rec=None):
    def scalar(v):
        return None if v is None else T.constant(np.array(v, dtype=np.float64))

    return FrameResult(
        x_hat=T.constant(np.zeros((1, 3, 16, 16))),
        f_hat=T.constant(np.zeros((1, 16, 16, 16))),
        d_me=scalar(d_me), d_rec=scalar(d_rec),
        bpp_me=scalar(bpp_me), bpp_rec=scalar(bpp_rec),
    )


class TestHierarchicalWeight:
    def test_anchor_values(self):
        assert hierarchical_weight(1) == 1.2
        assert hierarchical_weight(2) == 0.5
        assert hierarchical_weight(3) == 0.9
        assert hierarchical_weight(4) == 0.5
        assert hierarchical_weight(5) == 1.2

    def test_period_four(self):
        for p in range(1, 40):
            assert hierarchical_weight(p) == hierarchical_weight(p + 4)
            if p % 4 == 1:
                assert hierarchical_weight(p) == 1.2

    def test_rejects_nonpositive(self):
        with pytest.raises(ContractError):
            hierarchical_weight(0)


class TestLossAlgebra:
    def test_simple_values(self):
        fr = _stub_result(d_rec=0.0, bpp_me=0.1, bpp_rec=0.3)
        assert loss_all(fr, 170.0, 1.2).item() == pytest.approx(0.4, abs=1e-12)
        fr2 = _stub_result(d_rec=0.01, bpp_me=0.0, bpp_rec=0.0)
        assert loss_all(fr2, 85.0, 1.2).item() == pytest.approx(1.02, abs=1e-12)

    def test_identities_on_random_inputs(self, rng64):
        for _ in range(50):
            d_me, d_rec = rng64.uniform(0, 1, 2)
            bpp_me, bpp_rec = rng64.uniform(0, 4, 2)
            lam = float(rng64.uniform(50, 900))
            w = float(rng64.choice([0.5, 0.9, 1.2]))
            fr = _stub_result(d_me=d_me, d_rec=d_rec, bpp_me=bpp_me, bpp_rec=bpp_rec)
            l_all = loss_all(fr, lam, w).item()
            l_rec_rd = loss_rec_rd(fr, lam, w).item()
            l_me_rd = loss_me_rd(fr, lam, w).item()
            l_me_d = loss_me_d(fr, lam, w).item()
            assert abs(l_all - l_rec_rd - bpp_me) < 1e-12
            assert abs(l_me_rd - l_me_d - bpp_me) < 1e-12
            assert loss_rec_d(fr, lam, w).item() == pytest.approx(w * lam * d_rec, rel=1e-12)

    def test_missing_terms_rejected(self):
        fr = _stub_result(d_rec=0.1)
        with pytest.raises(ContractError):
            loss_all(fr, 85.0, 1.0)
        with pytest.raises(ContractError):
            loss_me_d(fr, 85.0, 1.0)


class TestCascade:
    def test_equal_values(self):
        losses = [T.constant(np.array(2.5, dtype=np.float64)) for _ in range(5)]
        assert loss_cascade(losses, 5).item() == pytest.approx(2.5, abs=1e-12)

    def test_two_frames(self):
        losses = [T.constant(np.array(v, dtype=np.float64)) for v in (1.0, 3.0)]
        assert loss_cascade(losses, 2).item() == 2.0

    def test_direct_sum_oracle(self, rng64):
        vals = rng64.uniform(0, 10, 7)
        losses = [T.constant(np.array(v)) for v in vals]
        assert loss_cascade(losses, 7).item() == pytest.approx(vals.sum() / 7, rel=1e-12)

    def test_count_mismatch(self):
        with pytest.raises(ContractError):
            loss_cascade([T.constant(np.array(1.0))], 2)


class TestAdamW:
    def test_zero_gradient_zero_decay_is_identity(self):
        value = np.array([1.0, -2.0])
        new, m, v, t = adamw_step(value, np.zeros(2), np.zeros(2), np.zeros(2), 0,
                                  lr=1e-3, weight_decay=0.0)
        np.testing.assert_array_equal(new, value)

    def test_first_step_magnitude_is_lr(self):
        g = np.full(3, 0.37)
        new, *_ = adamw_step(np.zeros(3), g, np.zeros(3), np.zeros(3), 0,
                             lr=1e-2, weight_decay=0.0)
        np.testing.assert_allclose(np.abs(new), 1e-2, rtol=1e-6)

    def test_decay_only_shrinks(self):
        value = np.array([2.0])
        new, *_ = adamw_step(value, np.zeros(1), np.zeros(1), np.zeros(1), 0,
                             lr=0.1, weight_decay=0.5)
        np.testing.assert_allclose(new, value * (1 - 0.1 * 0.5), rtol=1e-12)

    def test_optimizer_skips_missing_grads(self):
        model = init_model(CodecConfig(), seed=0)
        opt = AdamW()
        before = model.params["enc.c0.w"].data.copy()
        opt.step(model.params, ["enc.c0.w"], 1e-3)
        np.testing.assert_array_equal(before, model.params["enc.c0.w"].data)


class TestScheduleStage:
    def test_loss_subset_compatibility(self):
        with pytest.raises(ContractError):
            ScheduleStage(2, "recon", "me_d", 1e-4, 1)
        with pytest.raises(ContractError):
            ScheduleStage(6, "inter", "cascade", 1e-4, 1)
        ScheduleStage(6, "all", "cascade", 1e-4, 1)

    def test_default_schedule_shape(self):
        stages = default_schedule(repeat=True, long_final=True)
        assert len(stages) == 16
        assert stages[-1].frames == 19
        assert stages[-1].loss_kind == "repeat_long"
        assert stages[-1].n_repeat_max == 3
        short = default_schedule(repeat=False, long_final=False)
        assert short[-1].frames == 6
        assert short[-1].n_repeat_max == 0


class _ForcedRepeat:
    """Wrap a generator, forcing the first integers() draw (the repeat count)."""

    def __init__(self, inner, forced):
        self._inner = inner
        self._forced = forced
        self._first = True

    def integers(self, *args, **kwargs):
        if self._first:
            self._first = False
            return self._forced
        return self._inner.integers(*args, **kwargs)

    def uniform(self, *args, **kwargs):
        return self._inner.uniform(*args, **kwargs)


@pytest.fixture(scope="module")
def setup():
    model = init_model(CodecConfig(), seed=2)
    corpus = default_corpus(3, count=1, width=16, height=16, frames=6)
    frames = [T.constant(corpus[0][i][None]) for i in range(6)]
    return model, frames


@pytest.fixture(scope="module")
def tiny():
    return default_corpus(4, count=2, width=16, height=16, frames=6)


class TestRepeatLong:
    def test_zero_repeats_equals_plain_cascade(self, setup):
        model, frames = setup
        with T.Tape():
            got = loss_repeat_long(model, frames, 1.0, 170.0,
                                   np.random.default_rng(77), 0).item()

        rng = np.random.default_rng(77)
        rng.integers(0, 1)  # the repeat draw the real path consumes
        with T.Tape():
            ref, _ = codec.code_iframe(model, frames[0])
            fr = codec.forward_p_frame(model, frames[1], ref, 1.0, 1, "train", rng)
            ref = codec.next_reference(fr, 1)
            losses = []
            for p in range(2, 6):
                fr = codec.forward_p_frame(model, frames[p], ref, 1.0, p, "train", rng)
                ref = codec.next_reference(fr, p)
                losses.append(loss_all(fr, 170.0, hierarchical_weight(p)))
            want = loss_cascade(losses, 4).item()
        assert got == want

    def test_forced_repeats_count_compressions(self, setup):
        model, frames = setup
        counter = []
        rng = _ForcedRepeat(np.random.default_rng(5), 3)
        with T.Tape():
            loss_repeat_long(model, frames, 1.0, 170.0, rng, 3, repeat_counter=counter)
        assert len(counter) == 4  # first inter frame coded once plus 3 repeats

    def test_too_short_sequence_rejected(self, setup):
        model, frames = setup
        with pytest.raises(ContractError):
            loss_repeat_long(model, frames[:2], 1.0, 170.0, np.random.default_rng(0), 1)


class TestRunSchedule:
    def test_zero_epochs_leaves_model_unchanged(self, tiny):
        model = init_model(CodecConfig(), seed=1)
        before = {k: v.data.copy() for k, v in model.params.items()}
        run_schedule(model, [ScheduleStage(2, "inter", "me_d", 1e-3, 0)], tiny, seed=0)
        for k in before:
            np.testing.assert_array_equal(before[k], model.params[k].data)

    def test_inter_stage_freezes_recon_parameters(self, tiny):
        model = init_model(CodecConfig(), seed=1)
        recon_names = model.subset_names("recon")
        inter_names = model.subset_names("inter")
        assert not set(recon_names) & set(inter_names)
        before = {k: model.params[k].data.copy() for k in recon_names}
        run_schedule(model, [ScheduleStage(2, "inter", "me_rd", 1e-3, 1)], tiny, seed=0)
        for k in recon_names:
            np.testing.assert_array_equal(before[k], model.params[k].data)
        moved = any(
            not np.array_equal(model.params[k].data, init_model(CodecConfig(), seed=1).params[k].data)
            for k in inter_names
        )
        assert moved

    def test_seeded_determinism(self, tiny):
        losses = []
        for _ in range(2):
            model = init_model(CodecConfig(), seed=1)
            logs = run_schedule(model, [ScheduleStage(3, "all", "all", 1e-3, 1)], tiny, seed=9)
            losses.append((logs[0].mean_loss, model.params["enc.c0.w"].data.copy()))
        assert losses[0][0] == losses[1][0]
        np.testing.assert_array_equal(losses[0][1], losses[1][1])

    def test_window_longer_than_corpus_rejected(self, tiny):
        model = init_model(CodecConfig(), seed=1)
        with pytest.raises(ContractError):
            run_schedule(model, [ScheduleStage(19, "all", "cascade", 1e-3, 1)], tiny, seed=0)


class TestCheckpoint:
    def test_round_trip_with_optimizer(self, tmp_path):
        model = init_model(CodecConfig(use_dynfilter=False), seed=7)
        opt_state = {"enc.c0.w": (np.ones((2, 2)), np.full((2, 2), 0.5), 3)}
        path = tmp_path / "model.npz"
        save_checkpoint(path, model, optimizer_state=opt_state, extra={"seed": 7})
        loaded, opt, extra = load_checkpoint(path)
        assert extra["seed"] == 7
        assert loaded.config.use_dynfilter is False
        assert set(loaded.params) == set(model.params)
        for k in model.params:
            np.testing.assert_array_equal(loaded.params[k].data, model.params[k].data)
        m, v, t = opt["enc.c0.w"]
        assert t == 3
        np.testing.assert_array_equal(v, np.full((2, 2), 0.5))

    def test_bad_file_is_format_error(self, tmp_path):
        from ctxcodec.errors import FormatError

        path = tmp_path / "junk.npz"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(FormatError):
            load_checkpoint(path)
