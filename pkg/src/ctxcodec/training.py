"""Losses, optimizer, and the staged training procedure.

Seven loss kinds are supported. The single-frame kinds trade off motion or
reconstruction distortion against their rates; the cascade kind averages the
full rate-distortion loss over a chain of frames whose references stay in the
gradient graph, so the transforms see their own reconstruction error; and the
repeat-long kind additionally re-compresses the first inter frame a random
number of times before a long cascade, exposing the model to degraded
references of varying depth.

A schedule is a list of stages, each freezing everything outside its declared
parameter subset. Stage learning rates keep the published ratio structure but
are scaled up for the small synthetic corpus, where one epoch is a handful of
optimizer steps rather than tens of thousands.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import codec, tensor as T
from .errors import ContractError
from .model import LAMBDAS, ModelState
from .tensor import Tensor

WEIGHT_CYCLE = (0.5, 1.2, 0.5, 0.9)

LOSS_KINDS = ("me_d", "me_rd", "rec_d", "rec_rd", "all", "cascade", "repeat_long")

_SUBSET_FOR_LOSS = {
    "me_d": "inter",
    "me_rd": "inter",
    "rec_d": "recon",
    "rec_rd": "recon",
    "all": "all",
    "cascade": "all",
    "repeat_long": "all",
}


def hierarchical_weight(p: int) -> float:
    """Periodic rate-distortion weight of the p-th inter frame (1-based).

    The cycle is (0.5, 1.2, 0.5, 0.9) indexed by p mod 4, anchored so the
    first inter frame gets 1.2.
    """
    if p < 1:
        raise ContractError(f"inter-frame index must be >= 1, got {p}")
    return WEIGHT_CYCLE[p % 4]


@dataclass
class LossConfig:
    lam: float = LAMBDAS[0]
    weight_cycle: tuple = WEIGHT_CYCLE
    cascade_length: int = 5
    n_repeat_max: int = 0
    frame_budget: int = 6


@dataclass
class ScheduleStage:
    frames: int
    subset: str
    loss_kind: str
    learning_rate: float
    epochs: int
    n_repeat_max: int = 0

    def __post_init__(self):
        if self.loss_kind not in LOSS_KINDS:
            raise ContractError(f"unknown loss kind {self.loss_kind!r}")
        if self.subset not in ("inter", "recon", "all"):
            raise ContractError(f"unknown subset {self.subset!r}")
        if _SUBSET_FOR_LOSS[self.loss_kind] != self.subset:
            raise ContractError(
                f"loss {self.loss_kind!r} trains subset {_SUBSET_FOR_LOSS[self.loss_kind]!r}, "
                f"not {self.subset!r}"
            )
        if self.frames < 2:
            raise ContractError("a stage needs at least 2 frames (one intra, one inter)")


# ---------------------------------------------------------------------------
# per-frame losses


def _need(value, name):
    if value is None:
        raise ContractError(f"loss term {name} is missing from the frame result")
    return value


def loss_me_d(fr, lam: float, w: float) -> Tensor:
    d = _need(fr.d_me, "d_me")
    return T.mul(d, T.constant(w * lam, d.dtype))


def loss_me_rd(fr, lam: float, w: float) -> Tensor:
    d = _need(fr.d_me, "d_me")
    return T.add(T.mul(d, T.constant(w * lam, d.dtype)), _need(fr.bpp_me, "bpp_me"))


def loss_rec_d(fr, lam: float, w: float) -> Tensor:
    d = _need(fr.d_rec, "d_rec")
    return T.mul(d, T.constant(w * lam, d.dtype))


def loss_rec_rd(fr, lam: float, w: float) -> Tensor:
    d = _need(fr.d_rec, "d_rec")
    return T.add(T.mul(d, T.constant(w * lam, d.dtype)), _need(fr.bpp_rec, "bpp_rec"))


def loss_all(fr, lam: float, w: float) -> Tensor:
    d = _need(fr.d_rec, "d_rec")
    rates = T.add(_need(fr.bpp_me, "bpp_me"), _need(fr.bpp_rec, "bpp_rec"))
    return T.add(T.mul(d, T.constant(w * lam, d.dtype)), rates)


_FRAME_LOSS = {
    "me_d": loss_me_d,
    "me_rd": loss_me_rd,
    "rec_d": loss_rec_d,
    "rec_rd": loss_rec_rd,
    "all": loss_all,
}


def loss_cascade(frame_losses, cascade_length: int) -> Tensor:
    """Arithmetic mean of exactly ``cascade_length`` per-frame losses."""
    if len(frame_losses) != cascade_length:
        raise ContractError(
            f"cascade expects {cascade_length} frame losses, got {len(frame_losses)}"
        )
    total = frame_losses[0]
    for l in frame_losses[1:]:
        total = T.add(total, l)
    return T.mul(total, T.constant(1.0 / cascade_length, total.dtype))


# ---------------------------------------------------------------------------
# window rollouts


def _window_single(model, frames, lam_pos, lam, rng):
    """Per-frame losses with references detached between frames."""
    ref, _ = codec.code_iframe(model, frames[0])
    results = []
    for p in range(1, len(frames)):
        fr = codec.forward_p_frame(model, frames[p], ref, lam_pos, p, "train", rng)
        ref = codec.detached_reference(codec.next_reference(fr, p))
        results.append((p, fr))
    return results


def _window_cascade(model, frames, lam_pos, lam, rng):
    """Per-frame losses with the reference chain kept in the graph."""
    ref, _ = codec.code_iframe(model, frames[0])
    results = []
    for p in range(1, len(frames)):
        fr = codec.forward_p_frame(model, frames[p], ref, lam_pos, p, "train", rng)
        ref = codec.next_reference(fr, p)
        results.append((p, fr))
    return results


def window_loss(model, frames, stage: ScheduleStage, lam_pos: float, lam: float,
                rng, n_repeat_max: int = 0) -> Tensor:
    """Loss of one training window under a stage's loss kind."""
    kind = stage.loss_kind
    if kind in _FRAME_LOSS:
        results = _window_single(model, frames, lam_pos, lam, rng)
        losses = [_FRAME_LOSS[kind](fr, lam, hierarchical_weight(p)) for p, fr in results]
        return loss_cascade(losses, len(losses))
    if kind == "cascade":
        results = _window_cascade(model, frames, lam_pos, lam, rng)
        losses = [loss_all(fr, lam, hierarchical_weight(p)) for p, fr in results]
        return loss_cascade(losses, len(losses))
    if kind == "repeat_long":
        return loss_repeat_long(model, frames, lam_pos, lam, rng, n_repeat_max)
    raise ContractError(f"unknown loss kind {kind!r}")


def loss_repeat_long(model, frames, lam_pos: float, lam: float, rng,
                     n_repeat_max: int, repeat_counter: list | None = None) -> Tensor:
    """Repeat-compress the first inter frame, then cascade over the rest.

    The first inter frame is coded once and then re-compressed ``r`` more
    times (r drawn uniformly from 0..n_repeat_max); every extra pass feeds
    its own reconstruction back as both input and reference and contributes
    no loss. The final reconstruction becomes the reference of the second
    inter frame, and the loss is the cascade mean over the remaining frames.
    With r forced to 0 this is exactly the plain cascade.
    """
    if len(frames) < 3:
        raise ContractError(
            f"repeat-long needs at least 3 frames (intra, repeated inter, cascade), got {len(frames)}"
        )
    if n_repeat_max < 0:
        raise ContractError("n_repeat_max must be nonnegative")
    r = int(rng.integers(0, n_repeat_max + 1))
    ref, _ = codec.code_iframe(model, frames[0])
    fr = codec.forward_p_frame(model, frames[1], ref, lam_pos, 1, "train", rng)
    if repeat_counter is not None:
        repeat_counter.append(1)
    for _ in range(r):
        redo_ref = codec.ReferenceState(x_hat=fr.x_hat, f_hat=fr.f_hat, frame_index=0)
        fr = codec.forward_p_frame(model, fr.x_hat, redo_ref, lam_pos, 1, "train", rng)
        if repeat_counter is not None:
            repeat_counter.append(1)
    ref = codec.next_reference(fr, 1)
    losses = []
    for p in range(2, len(frames)):
        fr = codec.forward_p_frame(model, frames[p], ref, lam_pos, p, "train", rng)
        ref = codec.next_reference(fr, p)
        losses.append(loss_all(fr, lam, hierarchical_weight(p)))
    return loss_cascade(losses, len(losses))


# ---------------------------------------------------------------------------
# optimizer


def adamw_step(value, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8,
               weight_decay=1e-4):
    """One decoupled-weight-decay adaptive-moment update; returns new arrays."""
    t = t + 1
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    new_value = value - lr * (m_hat / (np.sqrt(v_hat) + eps) + weight_decay * value)
    return new_value, m, v, t


class AdamW:
    """Optimizer with per-parameter moments; only named parameters move."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.state: dict = {}

    def step(self, params: dict, names, lr: float):
        for name in names:
            p = params[name]
            if p.grad is None:
                continue
            if name not in self.state:
                self.state[name] = (np.zeros_like(p.data), np.zeros_like(p.data), 0)
            m, v, t = self.state[name]
            new_value, m, v, t = adamw_step(
                p.data, p.grad.astype(p.data.dtype), m, v, t, lr,
                self.beta1, self.beta2, self.eps, self.weight_decay,
            )
            p.data = new_value.astype(p.data.dtype)
            self.state[name] = (m, v, t)


def clip_gradients(params: dict, names, max_norm: float = 5.0):
    """Scale the gradients of the named parameters to a global norm cap."""
    total = 0.0
    for name in names:
        g = params[name].grad
        if g is not None:
            total += float(np.sum(g.astype(np.float64) ** 2))
    norm = np.sqrt(total)
    if norm > max_norm and norm > 0:
        scale = max_norm / norm
        for name in names:
            g = params[name].grad
            if g is not None:
                params[name].grad = g * g.dtype.type(scale)
    return norm


# ---------------------------------------------------------------------------
# schedule

# (frames, subset, loss, lr, epochs): the published row structure with epochs
# halved; learning rates are multiplied by TOY_LR_SCALE because an epoch over
# the synthetic corpus is orders of magnitude fewer steps than in the source
# setup.
_SCHEDULE_ROWS = (
    (2, "inter", "me_d", 1e-4, 1),
    (2, "recon", "rec_d", 1e-4, 1),
    (3, "recon", "rec_d", 1e-4, 1),
    (6, "recon", "rec_d", 1e-4, 1),
    (6, "inter", "me_d", 1e-4, 1),
    (6, "inter", "me_rd", 1e-4, 3),
    (6, "recon", "rec_d", 1e-4, 1),
    (6, "recon", "rec_rd", 1e-4, 3),
    (6, "all", "all", 1e-4, 2),
    (6, "all", "all", 5e-5, 2),
    (6, "all", "all", 1e-5, 2),
    (6, "all", "all", 5e-6, 2),
    (6, "all", "cascade", 5e-5, 1),
    (6, "all", "cascade", 5e-6, 1),
    (6, "all", "cascade", 1e-6, 1),
)

TOY_LR_SCALE = 10.0


def default_schedule(repeat: bool = False, long_final: bool = False,
                     lr_scale: float = TOY_LR_SCALE) -> list:
    """The staged schedule; the final stage is the repeat-long row.

    ``repeat`` enables up to 3 re-compressions of the first inter frame in
    the final stage; with it off the draw is pinned to zero, which reduces
    the stage to a plain cascade. ``long_final`` widens the final stage to
    19-frame windows (a 17-frame cascade); off keeps it at 6 frames.
    """
    stages = [
        ScheduleStage(f, s, k, lr * lr_scale, e) for f, s, k, lr, e in _SCHEDULE_ROWS
    ]
    stages.append(
        ScheduleStage(19 if long_final else 6, "all", "repeat_long", 1e-6 * lr_scale, 1,
                      n_repeat_max=3 if repeat else 0)
    )
    return stages


@dataclass
class StageLog:
    stage: int
    epoch: int
    mean_loss: float
    learning_rate: float


def run_schedule(model: ModelState, stages, corpus, seed: int, batch_size: int = 4,
                 optimizer: AdamW | None = None, lambdas=None, callback=None) -> list:
    """Execute the stages in order; returns per-epoch logs.

    ``corpus`` is a list of sequences shaped (F, 3, H, W) in [0, 1]. Each step
    draws a batch of sequences, a shared temporal offset, and a lambda index;
    only the stage's parameter subset is updated. Fixing the seed makes the
    whole run bit-reproducible within one precision mode.
    """
    if not corpus:
        raise ContractError("training corpus is empty")
    lambdas = tuple(lambdas if lambdas is not None else model.config.lambdas)
    opt = optimizer or AdamW()
    rng = np.random.default_rng([seed & 0x7FFFFFFF, 0x5EED])
    logs = []
    for si, stage in enumerate(stages):
        max_frames = min(len(seq) for seq in corpus)
        if stage.frames > max_frames:
            raise ContractError(
                f"stage {si} needs {stage.frames}-frame windows, corpus has {max_frames}"
            )
        names = model.subset_names(stage.subset)
        for epoch in range(stage.epochs):
            order = rng.permutation(len(corpus))
            losses = []
            for start in range(0, len(order), batch_size):
                idx = order[start:start + batch_size]
                offset = int(rng.integers(0, max_frames - stage.frames + 1))
                batch = np.stack([corpus[i][offset:offset + stage.frames] for i in idx])
                lam_idx = int(rng.integers(0, len(lambdas)))
                frames = [
                    T.constant(np.ascontiguousarray(batch[:, f])) for f in range(stage.frames)
                ]
                with T.Tape() as tape:
                    loss = window_loss(
                        model, frames, stage, float(lam_idx), lambdas[lam_idx], rng,
                        n_repeat_max=stage.n_repeat_max,
                    )
                tape.backward(loss)
                clip_gradients(model.params, names, max_norm=5.0)
                opt.step(model.params, names, stage.learning_rate)
                clear_grads(model)
                losses.append(float(loss.item()))
            log = StageLog(si, epoch, float(np.mean(losses)) if losses else float("nan"),
                           stage.learning_rate)
            logs.append(log)
            if callback:
                callback(log)
    return logs


def clear_grads(model: ModelState):
    for p in model.params.values():
        p.grad = None
