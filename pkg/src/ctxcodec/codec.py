"""The conditional coding graph: motion, temporal contexts, frame coding.

A P-frame is coded against a reference state (previous reconstruction plus
its feature). The pipeline estimates motion, codes it through a quantized
latent, motion-compensates the reference feature into three context scales,
gates the contexts by confidence, encodes the frame conditioned on them with
an optional reference-adaptive filtering stage, and mirrors everything on the
decoding side. The decoding path consumes only quantities a receiver has:
latents, hyper latents, the reference state, the quantization step position,
and the parameters.

Modes: "train" replaces rounding by additive uniform noise and keeps the
graph differentiable; "eval" rounds half away from zero and exposes the
integer latents for entropy coding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import entropy, tensor as T
from .confidence import confidence_maps, gate
from .dynfilter import generate_filters, svf_apply
from .errors import ContractError, DimensionError
from .model import ModelState
from .tensor import Tensor

LRELU_SLOPE = 0.1
IFRAME_BITS_PER_PIXEL = 24.0


@dataclass
class ReferenceState:
    """Reconstruction and feature of the previously coded frame."""

    x_hat: Tensor
    f_hat: Tensor
    frame_index: int

    def __post_init__(self):
        if self.x_hat.data.ndim != 4 or self.f_hat.data.ndim != 4:
            raise DimensionError("reference tensors must be 4-d")


@dataclass
class FrameResult:
    x_hat: Tensor
    f_hat: Tensor
    d_me: Tensor
    d_rec: Tensor
    bpp_me: Tensor
    bpp_rec: Tensor
    coded: "CodedLatents | None" = None


@dataclass
class CodedLatents:
    """Integer latents plus the distributions they were modelled with (eval mode)."""

    motion: np.ndarray
    motion_hyper: np.ndarray
    motion_params: entropy.LaplaceParams
    ctx: np.ndarray
    ctx_hyper: np.ndarray
    ctx_params: entropy.LaplaceParams
    bits_me: float
    bits_rec: float
    clamped_symbols: int = 0


def _conv(model, name, x, stride=1, act=True):
    y = T.conv2d(x, model.params[name + ".w"], model.params[name + ".b"], stride=stride, pad=1)
    return T.leaky_relu(y, LRELU_SLOPE) if act else y


def check_extents(h: int, w: int):
    if h % 16 or w % 16 or h < 16 or w < 16:
        raise DimensionError(f"frame extents must be multiples of 16, got {h}x{w}")


def interp_log_q(model: ModelState, kind: str, lam_pos: float) -> Tensor:
    """Quantization step at a continuous position in [0, 3].

    Integer positions select a trained step; fractional positions interpolate
    geometrically (linearly in the log domain) between the two neighbours.
    """
    if not 0.0 <= lam_pos <= 3.0:
        raise ContractError(f"lambda position {lam_pos} outside [0, 3]")
    base = "q_motion_log" if kind == "motion" else "q_ctx_log"
    i = int(np.floor(lam_pos))
    frac = lam_pos - i
    if i == 3:
        i, frac = 2, 1.0
    if frac == 0.0:
        return model.params[f"{base}.{i}"]
    lo = model.params[f"{base}.{i}"]
    hi = model.params[f"{base}.{i + 1}"]
    return T.add(T.mul(lo, T.constant(1.0 - frac, lo.dtype)), T.mul(hi, T.constant(frac, hi.dtype)))


def _quantize(latent: Tensor, log_q: Tensor, mode: str, rng) -> tuple:
    """Scale by 1/q, quantize per mode, rescale by q.

    Returns (quantized, dequantized, integer array or None, clamp count).
    Training adds uniform noise on the scaled latent; eval rounds half away
    from zero and clamps to the coder's alphabet so the reconstruction path
    sees exactly the values the bitstream will carry.
    """
    scaled = T.mul(latent, T.exp(T.neg(log_q)))
    if mode == "train":
        if rng is None:
            raise ContractError("train mode needs an rng for quantization noise")
        q = T.quantize_noise(scaled, rng)
        ints, clamped = None, 0
    elif mode == "eval":
        raw = T.round_half_away(scaled.data)
        clipped = np.clip(raw, entropy.ALPHABET_MIN, entropy.ALPHABET_MAX)
        clamped = int(np.sum(clipped != raw))
        ints = clipped.astype(np.int64)
        q = T.constant(clipped.astype(scaled.dtype))
    else:
        raise ContractError(f"unknown mode {mode!r}")
    return q, T.mul(q, T.exp(log_q)), ints, clamped


def _hyper_quantize(z: Tensor, mode: str, rng):
    if mode == "train":
        zq = T.quantize_noise(z, rng)
        return zq, None, 0
    raw = T.round_half_away(z.data)
    clipped = np.clip(raw, entropy.ALPHABET_MIN, entropy.ALPHABET_MAX)
    clamped = int(np.sum(clipped != raw))
    zq = T.constant(clipped.astype(z.dtype))
    return zq, clipped.astype(np.int64), clamped


def _prior_params(model, prefix: str, like: Tensor):
    n, c, h, w = like.shape
    mu = T.expand_channelwise(model.params[f"prior_{prefix}_mu"], n, h, w)
    b = T.exp(T.clamp(T.expand_channelwise(model.params[f"prior_{prefix}_logb"], n, h, w), -8.0, 8.0))
    return mu, b


def _hyper_synthesis(model, stem: str, z: Tensor, out_channels: int, lh: int, lw: int):
    """Hyper decoder: two upsampling stages, crop to the latent extent, split."""
    d = _conv(model, stem + ".c0", z)
    d = T.nearest_upsample2(d)
    d = _conv(model, stem + ".c1", d)
    d = T.nearest_upsample2(d)
    d = _conv(model, stem + ".c2", d, act=False)
    d = T.crop_spatial(d, lh, lw)
    mu = T.slice_channels(d, 0, out_channels)
    b = T.exp(T.clamp(T.slice_channels(d, out_channels, 2 * out_channels), -8.0, 8.0))
    return mu, b


# ---------------------------------------------------------------------------
# motion


def estimate_motion(model: ModelState, x: Tensor, x_prev: Tensor) -> Tensor:
    """Pixel-unit flow from a conv stack run at quarter resolution."""
    if x.shape != x_prev.shape:
        raise DimensionError(f"frame extents differ: {x.shape} vs {x_prev.shape}")
    q = T.avg_pool2(T.avg_pool2(T.concat_channels([x, x_prev])))
    h = _conv(model, "me.c0", q)
    h = _conv(model, "me.c1", h)
    h = _conv(model, "me.c2", h)
    h = _conv(model, "me.c3", h)
    flow_q = _conv(model, "me.c4", h, act=False)
    return T.nearest_upsample2(T.nearest_upsample2(flow_q))


def code_motion(model: ModelState, flow: Tensor, lam_pos: float, mode: str, rng=None):
    """Compress the flow field; returns (flow_hat, bits tensor, coded pieces)."""
    lat = _conv(model, "menc.c0", flow, stride=2)
    lat = _conv(model, "menc.c1", lat, stride=2)
    lat = _conv(model, "menc.c2", lat, stride=2)
    lat = _conv(model, "menc.c3", lat, stride=2, act=False)
    log_q = interp_log_q(model, "motion", lam_pos)
    lat_q, lat_deq, lat_ints, n_clamped = _quantize(lat, log_q, mode, rng)

    z = _conv(model, "mhe.c0", lat, stride=2)
    z = _conv(model, "mhe.c1", z, stride=2, act=False)
    z_q, z_ints, h_clamped = _hyper_quantize(z, mode, rng)
    mu, b = _hyper_synthesis(model, "mhd", z_q, model.config.motion_latent,
                             lat.shape[2], lat.shape[3])
    pmu, pb = _prior_params(model, "motion", z_q)
    bits = T.add(entropy.rate_bits(lat_q, mu, b), entropy.rate_bits(z_q, pmu, pb))

    flow_hat = decode_motion(model, lat_deq)
    coded = None
    if mode == "eval":
        coded = {
            "ints": lat_ints,
            "hyper_ints": z_ints,
            "params": entropy.LaplaceParams(mu.data.astype(np.float64), b.data.astype(np.float64)),
            "clamped": n_clamped + h_clamped,
        }
    return flow_hat, bits, coded


def decode_motion(model: ModelState, lat_deq: Tensor) -> Tensor:
    d = _conv(model, "mdec.c0", lat_deq)
    d = T.nearest_upsample2(d)
    d = _conv(model, "mdec.c1", d)
    d = T.nearest_upsample2(d)
    d = _conv(model, "mdec.c2", d)
    d = T.nearest_upsample2(d)
    d = _conv(model, "mdec.c3", d)
    d = T.nearest_upsample2(d)
    return _conv(model, "mdec.c4", d, act=False)


def motion_hyper_params(model: ModelState, z_deq: Tensor, lh: int, lw: int):
    """Distributions of the motion latent from a dequantized hyper latent."""
    return _hyper_synthesis(model, "mhd", z_deq, model.config.motion_latent, lh, lw)


# ---------------------------------------------------------------------------
# temporal contexts


def mine_contexts(model: ModelState, f_prev: Tensor, flow_hat: Tensor, variant: int):
    """Motion-compensate the reference feature into three context scales.

    The full-resolution context uses one of four first-layer variants; the
    coarser scales pool the reference feature and warp it with a flow halved
    in magnitude and extent per scale.
    """
    if not 0 <= variant <= 3:
        raise ContractError(f"context miner variant {variant} outside 0..3")
    c0 = _conv(model, f"miner.first{variant}", T.bilinear_warp(f_prev, flow_hat))
    flow1 = T.mul(T.avg_pool2(flow_hat), T.constant(0.5, flow_hat.dtype))
    p1 = T.avg_pool2(f_prev)
    c1 = _conv(model, "miner.c1", T.bilinear_warp(p1, flow1))
    flow2 = T.mul(T.avg_pool2(flow1), T.constant(0.5, flow_hat.dtype))
    p2 = T.avg_pool2(p1)
    c2 = _conv(model, "miner.c2", T.bilinear_warp(p2, flow2))
    return c0, c1, c2


def _gated(model, side: str, scale: int, context: Tensor, intermediate: Tensor) -> Tensor:
    if not model.config.use_confidence:
        return context
    stem = f"conf_{side}.s{scale}"
    maps = confidence_maps(context, intermediate,
                           model.params[stem + ".w"], model.params[stem + ".b"])
    return gate(context, maps)


# ---------------------------------------------------------------------------
# frame coding


def encode_frame(model: ModelState, x: Tensor, contexts, x_prev: Tensor,
                 lam_pos: float, mode: str, rng=None):
    """Contextual encoder plus hyper path; returns (latents, bits, coded pieces)."""
    c0, c1, c2 = contexts
    f = T.concat_channels([x, _gated(model, "e", 0, c0, x)])
    f = _conv(model, "enc.c0", f, stride=2)
    if model.config.use_dynfilter:
        bank = generate_filters(x_prev, model.params["dyn_e.gen.w"],
                                model.params["dyn_e.gen.b"], stride=2)
        f = svf_apply(f, bank)
    f = _conv(model, "enc.c1", T.concat_channels([f, _gated(model, "e", 1, c1, f)]), stride=2)
    f = _conv(model, "enc.c2", T.concat_channels([f, _gated(model, "e", 2, c2, f)]), stride=2)
    y = _conv(model, "enc.c3", f, stride=2, act=False)

    log_q = interp_log_q(model, "ctx", lam_pos)
    y_q, y_deq, y_ints, n_clamped = _quantize(y, log_q, mode, rng)

    z = _conv(model, "che.c0", y, stride=2)
    z = _conv(model, "che.c1", z, stride=2, act=False)
    z_q, z_ints, h_clamped = _hyper_quantize(z, mode, rng)
    mu, b = _hyper_synthesis(model, "chd", z_q, model.config.ctx_latent, y.shape[2], y.shape[3])
    pmu, pb = _prior_params(model, "ctx", z_q)
    bits = T.add(entropy.rate_bits(y_q, mu, b), entropy.rate_bits(z_q, pmu, pb))

    coded = None
    if mode == "eval":
        coded = {
            "ints": y_ints,
            "hyper_ints": z_ints,
            "params": entropy.LaplaceParams(mu.data.astype(np.float64), b.data.astype(np.float64)),
            "clamped": n_clamped + h_clamped,
        }
    return y_deq, bits, coded


def decode_frame(model: ModelState, y_deq: Tensor, contexts, x_prev: Tensor):
    """Mirror decoder; consumes only receiver-side quantities.

    Returns the clamped reconstruction and the feature that becomes the next
    frame's reference (the input of the head's last convolution).
    """
    c0, c1, c2 = contexts
    d = _conv(model, "dec.c0", y_deq)
    d = T.nearest_upsample2(d)
    d = _conv(model, "dec.c1", d)
    d = T.nearest_upsample2(d)
    d = _conv(model, "dec.c2", T.concat_channels([d, _gated(model, "d", 2, c2, d)]))
    d = T.nearest_upsample2(d)
    d = _conv(model, "dec.c3", T.concat_channels([d, _gated(model, "d", 1, c1, d)]))
    d = T.nearest_upsample2(d)
    d = _conv(model, "dec.c4", T.concat_channels([d, _gated(model, "d", 0, c0, d)]))
    if model.config.use_dynfilter:
        bank = generate_filters(x_prev, model.params["dyn_d.gen.w"],
                                model.params["dyn_d.gen.b"], stride=1)
        d = svf_apply(d, bank)
    f_hat = _conv(model, "head.c0", d)
    x_raw = _conv(model, "head.c1", f_hat, act=False)
    return T.clamp(x_raw, 0.0, 1.0), f_hat


def ctx_hyper_params(model: ModelState, z_deq: Tensor, lh: int, lw: int):
    """Distributions of the context latent from a dequantized hyper latent."""
    return _hyper_synthesis(model, "chd", z_deq, model.config.ctx_latent, lh, lw)


# ---------------------------------------------------------------------------
# whole frames


def code_iframe(model: ModelState, x: Tensor, frame_index: int = 0):
    """Verbatim intra frame: 8-bit quantized pixels, constant 24 bpp.

    Returns (ReferenceState, reconstruction); exact when the input already
    lies on the 8-bit grid.
    """
    levels = np.clip(T.round_half_away(x.data * 255.0), 0.0, 255.0)
    x8 = T.constant(levels / np.asarray(255.0, dtype=x.dtype), x.dtype)
    f_hat = _conv(model, "ifeat.c0", x8)
    return ReferenceState(x_hat=x8, f_hat=f_hat, frame_index=frame_index), x8


def iframe_payload(x: Tensor) -> bytes:
    return np.clip(T.round_half_away(x.data[0] * 255.0), 0, 255).astype(np.uint8).tobytes()


def iframe_from_payload(model: ModelState, payload: bytes, h: int, w: int, frame_index: int):
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(1, 3, h, w)
    x8 = T.constant(arr.astype(T.default_dtype()) / T.default_dtype()(255.0))
    f_hat = _conv(model, "ifeat.c0", x8)
    return ReferenceState(x_hat=x8, f_hat=f_hat, frame_index=frame_index), x8


def forward_p_frame(model: ModelState, x: Tensor, ref: ReferenceState, lam_pos: float,
                    p_index: int, mode: str, rng=None) -> FrameResult:
    """Code one inter frame against a reference state.

    ``p_index`` is the 1-based position of the frame in its intra period; it
    selects the context-miner variant and must be one past the reference's
    tag, so a stale reference is impossible to use silently.
    """
    if p_index < 1:
        raise ContractError(f"p_index must be >= 1, got {p_index}")
    n, c, h, w = x.shape
    check_extents(h, w)
    if ref.frame_index != p_index - 1:
        raise ContractError(
            f"stale reference: tagged {ref.frame_index}, coding frame {p_index}"
        )
    flow = estimate_motion(model, x, ref.x_hat)
    flow_hat, bits_me, coded_me = code_motion(model, flow, lam_pos, mode, rng)
    contexts = mine_contexts(model, ref.f_hat, flow_hat, p_index % 4)
    y_deq, bits_rec, coded_rec = encode_frame(model, x, contexts, ref.x_hat, lam_pos, mode, rng)
    x_hat, f_hat = decode_frame(model, y_deq, contexts, ref.x_hat)

    d_me = T.mse(x, T.bilinear_warp(ref.x_hat, flow_hat))
    d_rec = T.mse(x, x_hat)
    inv_px = T.constant(1.0 / (n * h * w), x.dtype)
    result = FrameResult(
        x_hat=x_hat,
        f_hat=f_hat,
        d_me=d_me,
        d_rec=d_rec,
        bpp_me=T.mul(bits_me, inv_px),
        bpp_rec=T.mul(bits_rec, inv_px),
    )
    if mode == "eval":
        result.coded = CodedLatents(
            motion=coded_me["ints"],
            motion_hyper=coded_me["hyper_ints"],
            motion_params=coded_me["params"],
            ctx=coded_rec["ints"],
            ctx_hyper=coded_rec["hyper_ints"],
            ctx_params=coded_rec["params"],
            bits_me=float(bits_me.item()),
            bits_rec=float(bits_rec.item()),
            clamped_symbols=coded_me["clamped"] + coded_rec["clamped"],
        )
    return result


def next_reference(result: FrameResult, frame_index: int) -> ReferenceState:
    return ReferenceState(x_hat=result.x_hat, f_hat=result.f_hat, frame_index=frame_index)


def detached_reference(ref: ReferenceState) -> ReferenceState:
    return ReferenceState(
        x_hat=ref.x_hat.detach(), f_hat=ref.f_hat.detach(), frame_index=ref.frame_index
    )


def decode_p_frame(model: ModelState, motion_ints: np.ndarray, ctx_ints: np.ndarray,
                   ref: ReferenceState, lam_pos: float, p_index: int):
    """Receiver-side decode of a P-frame from integer latents alone."""
    dt = T.default_dtype()
    log_qm = interp_log_q(model, "motion", lam_pos)
    lat_deq = T.mul(T.constant(motion_ints.astype(dt)), T.exp(log_qm))
    flow_hat = decode_motion(model, lat_deq)
    contexts = mine_contexts(model, ref.f_hat, flow_hat, p_index % 4)
    log_qc = interp_log_q(model, "ctx", lam_pos)
    y_deq = T.mul(T.constant(ctx_ints.astype(dt)), T.exp(log_qc))
    x_hat, f_hat = decode_frame(model, y_deq, contexts, ref.x_hat)
    return x_hat, f_hat
