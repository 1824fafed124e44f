"""Deterministic synthetic test sequences.

Three generators cover the motion regimes the codec has to face: global
integer translation of a filtered-noise texture (easy, matches the motion
model), rotation plus zoom (non-translational, defeats a pure translation
model, so prediction confidence matters), and a textured patch sliding over a
static background (occlusion). Frames are quantized to the 8-bit grid at
generation time so the verbatim intra path is exactly lossless on them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

GENERATORS = ("translate", "rotate_zoom", "occlusion")


@dataclass
class SequenceSpec:
    width: int = 64
    height: int = 64
    frame_count: int = 16
    source: str = "synthetic"
    fps: float = 30.0

    def __post_init__(self):
        if self.frame_count < 2:
            raise ContractError("a sequence needs at least 2 frames")
        if self.width % 16 or self.height % 16:
            raise ContractError(
                f"extents must be multiples of 16, got {self.width}x{self.height}"
            )


def _quantize8(frames: np.ndarray) -> np.ndarray:
    return (np.floor(np.clip(frames, 0.0, 1.0) * 255.0 + 0.5) / 255.0).astype(np.float32)


def _smooth_texture(rng: np.random.Generator, h: int, w: int, cutoff: float = 0.05) -> np.ndarray:
    """Low-pass filtered white noise, one (3, h, w) texture in [0.08, 0.92]."""
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    lowpass = 1.0 / (1.0 + (fy * fy + fx * fx) / (cutoff * cutoff))
    chans = []
    for _ in range(3):
        noise = rng.standard_normal((h, w))
        tex = np.fft.ifft2(np.fft.fft2(noise) * lowpass).real
        lo, hi = tex.min(), tex.max()
        chans.append(0.08 + 0.84 * (tex - lo) / max(hi - lo, 1e-9))
    return np.stack(chans)


def _bilinear_sample(tex: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    h, w = tex.shape[1:]
    ys = np.clip(ys, 0.0, h - 1.0)
    xs = np.clip(xs, 0.0, w - 1.0)
    y0 = np.clip(np.floor(ys).astype(int), 0, h - 1)
    x0 = np.clip(np.floor(xs).astype(int), 0, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = ys - y0
    wx = xs - x0
    out = (
        tex[:, y0, x0] * (1 - wy) * (1 - wx)
        + tex[:, y0, x1] * (1 - wy) * wx
        + tex[:, y1, x0] * wy * (1 - wx)
        + tex[:, y1, x1] * wy * wx
    )
    return out


def gen_synthetic_sequence(spec: SequenceSpec, generator: str, seed: int, **options) -> np.ndarray:
    """Frames shaped (F, 3, H, W), float32 on the 8-bit grid, deterministic in seed."""
    if generator not in GENERATORS:
        raise ContractError(f"unknown generator {generator!r}; choose from {GENERATORS}")
    rng = np.random.default_rng([seed & 0x7FFFFFFF, GENERATORS.index(generator)])
    h, w, f = spec.height, spec.width, spec.frame_count
    if generator == "translate":
        return _gen_translate(rng, h, w, f, options.get("shift", (2, 1)))
    if generator == "rotate_zoom":
        return _gen_rotate_zoom(
            rng, h, w, f,
            options.get("degrees_per_frame", 1.5),
            options.get("zoom_per_frame", 1.004),
        )
    return _gen_occlusion(
        rng, h, w, f,
        options.get("fg_size", max(8, min(h, w) // 4)),
        options.get("fg_speed", (3, 2)),
    )


def _gen_translate(rng, h, w, f, shift) -> np.ndarray:
    dx, dy = int(shift[0]), int(shift[1])
    span_x = abs(dx) * (f - 1)
    span_y = abs(dy) * (f - 1)
    canvas = _smooth_texture(rng, h + span_y, w + span_x)
    ox = span_x if dx < 0 else 0
    oy = span_y if dy < 0 else 0
    frames = np.empty((f, 3, h, w), dtype=np.float64)
    for t in range(f):
        y0 = oy + dy * t
        x0 = ox + dx * t
        frames[t] = canvas[:, y0:y0 + h, x0:x0 + w]
    return _quantize8(frames)


def _gen_rotate_zoom(rng, h, w, f, deg_per_frame, zoom_per_frame) -> np.ndarray:
    canvas = _smooth_texture(rng, 2 * h, 2 * w)
    cy, cx = (2 * h - 1) / 2.0, (2 * w - 1) / 2.0
    gy, gx = np.mgrid[0:h, 0:w]
    gy = gy - (h - 1) / 2.0
    gx = gx - (w - 1) / 2.0
    frames = np.empty((f, 3, h, w), dtype=np.float64)
    for t in range(f):
        theta = np.deg2rad(deg_per_frame * t)
        scale = zoom_per_frame ** t
        c, s = np.cos(theta) / scale, np.sin(theta) / scale
        xs = cx + c * gx - s * gy
        ys = cy + s * gx + c * gy
        frames[t] = _bilinear_sample(canvas, ys, xs)
    return _quantize8(frames)


def _gen_occlusion(rng, h, w, f, fg_size, fg_speed) -> np.ndarray:
    if fg_size >= min(h, w):
        raise ContractError("foreground does not fit inside the frame")
    background = _smooth_texture(rng, h, w)
    fg = _smooth_texture(rng, fg_size, fg_size, cutoff=0.25)
    fg = np.clip(fg + 0.25, 0.0, 1.0)  # brighter than the background on average
    vx, vy = int(fg_speed[0]), int(fg_speed[1])
    x = int(rng.integers(0, w - fg_size + 1))
    y = int(rng.integers(0, h - fg_size + 1))
    frames = np.empty((f, 3, h, w), dtype=np.float64)
    for t in range(f):
        frame = background.copy()
        frame[:, y:y + fg_size, x:x + fg_size] = fg
        frames[t] = frame
        x += vx
        y += vy
        if x < 0 or x > w - fg_size:
            vx = -vx
            x += 2 * vx
        if y < 0 or y > h - fg_size:
            vy = -vy
            y += 2 * vy
    return _quantize8(frames)


# Half translation (with varied shifts), the rest split between the regimes
# the simple motion model cannot express.
_CORPUS_MIX = ("translate", "rotate_zoom", "translate", "occlusion")
_CORPUS_SHIFTS = ((2, 1), (1, 0), (-2, 1), (3, 2), (0, 2), (-1, -2))


def _mixed_sequence(spec: SequenceSpec, slot: int, seed: int) -> np.ndarray:
    gen = _CORPUS_MIX[slot % len(_CORPUS_MIX)]
    options = {}
    if gen == "translate":
        options["shift"] = _CORPUS_SHIFTS[slot % len(_CORPUS_SHIFTS)]
    return gen_synthetic_sequence(spec, gen, seed, **options)


def default_corpus(seed: int, count: int = 24, width: int = 32, height: int = 32,
                   frames: int = 19) -> list:
    """Training corpus: varied global translations, rotation-zoom, occlusion."""
    spec = SequenceSpec(width=width, height=height, frame_count=frames)
    return [_mixed_sequence(spec, i, seed * 1000 + i) for i in range(count)]


def heldout_sequences(seed: int, count: int, width: int = 64, height: int = 64,
                      frames: int = 33) -> list:
    """Evaluation sequences drawn from a seed range disjoint from training."""
    spec = SequenceSpec(width=width, height=height, frame_count=frames)
    return [
        _mixed_sequence(spec, i, 7_000_000 + seed * 1000 + i) for i in range(count)
    ]
