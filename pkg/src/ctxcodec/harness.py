"""Sequence-level drivers: real coding runs, RD evaluation, ablation grid.

This is the layer that turns the frame graph into streams and numbers: it
walks a sequence with the configured intra period, entropy-codes every latent
into the container format, decodes streams back (consuming nothing but the
bytes, the checkpoint, and the header), and aggregates rate-quality
statistics for curves, BD-rate tables, and per-frame plots.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import bitstream, codec, entropy, tensor as T, training
from .errors import ContractError, FormatError
from .metrics import RDPoint, bd_rate, psnr_rgb
from .model import (
    CodecConfig, ModelState, init_model, m_grid_config, m_grid_training,
)
from .synthetic import default_corpus, heldout_sequences
from .training import default_schedule, run_schedule


@dataclass
class FrameStat:
    index: int
    kind: str  # "I" or "P"
    bits: int  # payload bits, excluding the chunk header
    psnr: float
    estimated_bits: float = 0.0


@dataclass
class EncodeResult:
    stream: bytes
    recon: np.ndarray
    stats: list
    clamped_symbols: int = 0

    @property
    def total_bits(self) -> int:
        return 8 * len(self.stream)

    def bpp(self, width: int, height: int) -> float:
        return self.total_bits / (width * height * len(self.stats))

    def mean_psnr(self) -> float:
        return float(np.mean([s.psnr for s in self.stats]))


def _latent_extents(h: int, w: int):
    def s2(x):
        return (x - 1) // 2 + 1

    lh, lw = h // 16, w // 16
    return lh, lw, s2(s2(lh)), s2(s2(lw))


def _prior_laplace(model: ModelState, prefix: str, shape) -> entropy.LaplaceParams:
    mu = model.params[f"prior_{prefix}_mu"].data.astype(np.float64)
    b = np.exp(np.clip(model.params[f"prior_{prefix}_logb"].data.astype(np.float64), -8.0, 8.0))
    n, c, h, w = shape
    full_mu = np.broadcast_to(mu[None, :, None, None], shape).copy()
    full_b = np.broadcast_to(b[None, :, None, None], shape).copy()
    return entropy.LaplaceParams(full_mu, full_b)


def _clamp_symbols(ints: np.ndarray, stats: dict) -> np.ndarray:
    clamped = np.clip(ints, entropy.ALPHABET_MIN, entropy.ALPHABET_MAX)
    overflow = int(np.sum(clamped != ints))
    if overflow:
        stats["clamped_symbols"] = stats.get("clamped_symbols", 0) + overflow
    return clamped


def _code_segment(ints: np.ndarray, params: entropy.LaplaceParams, stats: dict) -> bytes:
    symbols = _clamp_symbols(ints.reshape(-1), stats)
    return entropy.range_encode(symbols, entropy.LaplaceParams(
        params.mu.reshape(-1), params.b.reshape(-1)))


def _decode_segment(data: bytes, params: entropy.LaplaceParams, shape) -> np.ndarray:
    flat = entropy.range_decode(
        data, entropy.LaplaceParams(params.mu.reshape(-1), params.b.reshape(-1)),
        int(np.prod(shape)),
    )
    return flat.reshape(shape)


def encode_sequence(model: ModelState, frames: np.ndarray, lam_pos: float,
                    intra_period: int) -> EncodeResult:
    """Code a (F, 3, H, W) sequence into a bitstream; intra_period -1 means
    a single leading intra frame."""
    frames = np.asarray(frames, dtype=T.default_dtype())
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ContractError(f"expected (F, 3, H, W) frames, got {frames.shape}")
    count, _, h, w = frames.shape
    codec.check_extents(h, w)
    if intra_period == 0 or intra_period < -1:
        raise ContractError(f"intra period must be -1 or positive, got {intra_period}")
    lam_pos = float(np.float32(lam_pos))  # what the header will carry

    chunks = []
    stats: list = []
    side: dict = {}
    clamped = 0
    recon = np.empty_like(frames)
    ref = None
    p_index = 0
    for t in range(count):
        x = T.constant(frames[t][None])
        is_intra = t == 0 or (intra_period > 0 and t % intra_period == 0)
        if is_intra:
            ref, x_hat = codec.code_iframe(model, x, frame_index=0)
            payload = codec.iframe_payload(x)
            chunks.append((bitstream.KIND_INTRA, payload))
            p_index = 0
        else:
            p_index += 1
            fr = codec.forward_p_frame(model, x, ref, lam_pos, p_index, "eval")
            ref = codec.next_reference(fr, p_index)
            x_hat = fr.x_hat
            c = fr.coded
            clamped += c.clamped_symbols
            segments = [
                _code_segment(c.motion_hyper, _prior_laplace(model, "motion", c.motion_hyper.shape), side),
                _code_segment(c.motion, c.motion_params, side),
                _code_segment(c.ctx_hyper, _prior_laplace(model, "ctx", c.ctx_hyper.shape), side),
                _code_segment(c.ctx, c.ctx_params, side),
            ]
            payload = bitstream.join_segments(segments)
            chunks.append((bitstream.KIND_INTER, payload))
        recon[t] = x_hat.data[0]
        stats.append(FrameStat(
            index=t,
            kind="I" if is_intra else "P",
            bits=8 * len(chunks[-1][1]),
            psnr=psnr_rgb(frames[t], recon[t]),
            estimated_bits=0.0 if is_intra else fr.coded.bits_me + fr.coded.bits_rec,
        ))
    header = bitstream.StreamHeader(w, h, count, lam_pos)
    clamped += side.get("clamped_symbols", 0)
    return EncodeResult(stream=bitstream.write_stream(header, chunks), recon=recon,
                        stats=stats, clamped_symbols=clamped)


def decode_sequence(model: ModelState, data: bytes) -> np.ndarray:
    """Decode a stream produced by encode_sequence back to (F, 3, H, W) frames."""
    header, chunks = bitstream.read_stream(data)
    if not np.isfinite(header.q_position) or not 0.0 <= header.q_position <= 3.0:
        raise FormatError(
            f"header quantization position {header.q_position} outside [0, 3]"
        )
    h, w = header.height, header.width
    lh, lw, hh, hw = _latent_extents(h, w)
    cfg = model.config
    motion_shape = (1, cfg.motion_latent, lh, lw)
    ctx_shape = (1, cfg.ctx_latent, lh, lw)
    motion_hyper_shape = (1, cfg.hyper_channels, hh, hw)
    ctx_hyper_shape = (1, cfg.hyper_channels, hh, hw)
    lam_pos = float(header.q_position)
    dt = T.default_dtype()

    out = np.empty((header.frame_count, 3, h, w), dtype=dt)
    ref = None
    p_index = 0
    for t, (kind, payload) in enumerate(chunks):
        if kind == bitstream.KIND_INTRA:
            ref, x_hat = codec.iframe_from_payload(model, payload, h, w, frame_index=0)
            p_index = 0
        else:
            if ref is None:
                raise ContractError("stream starts with an inter frame")
            p_index += 1
            seg_mh, seg_m, seg_ch, seg_c = bitstream.split_segments(payload)
            mh_ints = _decode_segment(
                seg_mh, _prior_laplace(model, "motion", motion_hyper_shape), motion_hyper_shape)
            mu, b = codec.motion_hyper_params(model, T.constant(mh_ints.astype(dt)), lh, lw)
            m_ints = _decode_segment(
                seg_m,
                entropy.LaplaceParams(mu.data.astype(np.float64), b.data.astype(np.float64)),
                motion_shape,
            )
            ch_ints = _decode_segment(
                seg_ch, _prior_laplace(model, "ctx", ctx_hyper_shape), ctx_hyper_shape)
            mu, b = codec.ctx_hyper_params(model, T.constant(ch_ints.astype(dt)), lh, lw)
            c_ints = _decode_segment(
                seg_c,
                entropy.LaplaceParams(mu.data.astype(np.float64), b.data.astype(np.float64)),
                ctx_shape,
            )
            x_hat, f_hat = codec.decode_p_frame(model, m_ints, c_ints, ref, lam_pos, p_index)
            ref = codec.ReferenceState(x_hat=x_hat, f_hat=f_hat, frame_index=p_index)
        out[t] = x_hat.data[0]
    return out


# ---------------------------------------------------------------------------
# evaluation


def rd_point(model: ModelState, sequences, lam_pos: float, intra_period: int,
             label: str = "") -> RDPoint:
    """Average rate and quality over sequences at one quantization position."""
    bpps = []
    psnrs = []
    for frames in sequences:
        res = encode_sequence(model, frames, lam_pos, intra_period)
        bpps.append(res.bpp(frames.shape[3], frames.shape[2]))
        psnrs.append(res.mean_psnr())
    return RDPoint(bpp=float(np.mean(bpps)), quality=float(np.mean(psnrs)), label=label)


def evaluate_rd(model: ModelState, sequences, lam_positions, intra_period: int,
                label: str = "") -> list:
    points = [
        rd_point(model, sequences, pos, intra_period, label=f"{label}@{pos:g}")
        for pos in lam_positions
    ]
    return sorted(points, key=lambda p: p.bpp)


def per_frame_rows(model: ModelState, frames: np.ndarray, lam_pos: float,
                   intra_period: int) -> list:
    """Rows of (frame, psnr, bits) for the per-frame curve CSV."""
    res = encode_sequence(model, frames, lam_pos, intra_period)
    return [(s.index, s.psnr, s.bits) for s in res.stats]


def psnr_slope(model: ModelState, frames: np.ndarray, lam_pos: float,
               first_frame: int = 10) -> float:
    """Least-squares slope of per-frame PSNR from first_frame on, intra -1.

    The slope is the error-propagation signature: less negative means the
    quality decays more slowly along the sequence.
    """
    res = encode_sequence(model, frames, lam_pos, intra_period=-1)
    ys = np.array([s.psnr for s in res.stats], dtype=np.float64)
    if len(ys) <= first_frame + 1:
        raise ContractError("sequence too short for a slope measurement")
    xs = np.arange(first_frame, len(ys), dtype=np.float64)
    return float(np.polyfit(xs, ys[first_frame:], 1)[0])


# ---------------------------------------------------------------------------
# training and the ablation grid


@dataclass
class TrainSettings:
    width: int = 32
    height: int = 32
    corpus_size: int = 24
    corpus_frames: int = 19
    batch_size: int = 4
    lr_scale: float = training.TOY_LR_SCALE
    lambdas: tuple = ()


@dataclass
class EvalSettings:
    width: int = 64
    height: int = 64
    frames: int = 33
    intra_period: int = 32
    sequences: int = 2
    lam_positions: tuple = (0.0, 1.0, 2.0, 3.0)


def train_model(label: str, seed: int, settings: TrainSettings | None = None,
                callback=None):
    """Train one ablation configuration from scratch; returns (model, logs)."""
    settings = settings or TrainSettings()
    config = m_grid_config(label)
    if settings.lambdas:
        config.lambdas = tuple(settings.lambdas)
    repeat, long_final = m_grid_training(label)
    model = init_model(config, seed)
    corpus = default_corpus(
        seed, count=settings.corpus_size, width=settings.width,
        height=settings.height, frames=settings.corpus_frames,
    )
    stages = default_schedule(repeat=repeat, long_final=long_final,
                              lr_scale=settings.lr_scale)
    logs = run_schedule(model, stages, corpus, seed,
                        batch_size=settings.batch_size, callback=callback)
    return model, logs


@dataclass
class AblationCell:
    label: str
    seed: int
    bd_rate: float
    points: list


@dataclass
class AblationResult:
    cells: list = field(default_factory=list)
    models: dict = field(default_factory=dict)

    def rates(self, label: str) -> list:
        return [c.bd_rate for c in self.cells if c.label == label]

    def median(self, label: str) -> float:
        return float(np.median(self.rates(label)))


def run_ablation(labels, seeds, train_settings: TrainSettings | None = None,
                 eval_settings: EvalSettings | None = None, progress=None,
                 keep_models: bool = False) -> AblationResult:
    """Train every (configuration, seed) cell and report BD-rate against m1.

    The anchor configuration m1 is trained for each seed whether or not it is
    in ``labels``; every configuration under one seed shares held-out
    sequences, initialization of common parameters, and the data order, so
    differences isolate the enabled features.
    """
    train_settings = train_settings or TrainSettings()
    eval_settings = eval_settings or EvalSettings()
    labels = list(labels)
    result = AblationResult()
    for seed in seeds:
        held = heldout_sequences(seed, eval_settings.sequences,
                                 width=eval_settings.width,
                                 height=eval_settings.height,
                                 frames=eval_settings.frames)
        curves: dict = {}
        for label in dict.fromkeys(["m1"] + labels):
            if progress:
                progress(f"training {label} seed {seed}")
            model, _ = train_model(label, seed, train_settings)
            curves[label] = evaluate_rd(
                model, held, eval_settings.lam_positions,
                eval_settings.intra_period, label=label,
            )
            if keep_models:
                result.models[(label, seed)] = model
        for label in labels:
            result.cells.append(AblationCell(
                label=label, seed=seed,
                bd_rate=bd_rate(curves["m1"], curves[label]),
                points=curves[label],
            ))
    return result
