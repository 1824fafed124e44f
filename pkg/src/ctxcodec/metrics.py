"""Quality metrics and rate-distortion curve comparison."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError

PSNR_CAP_DB = 100.0


@dataclass
class RDPoint:
    """One operating point of a codec: average rate and quality."""

    bpp: float
    quality: float
    label: str = ""


def psnr_rgb(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio over all RGB samples of [0, 1] frames.

    Identical frames return the 100 dB cap instead of infinity.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shape mismatch {a.shape} vs {b.shape}")
    err = float(np.mean((a - b) ** 2))
    if err <= 0.0:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / err), PSNR_CAP_DB)


# Full-range BT.601 analysis matrix (the JPEG YCbCr convention).
_RGB_TO_YUV = np.array(
    [
        [0.299, 0.587, 0.114],
        [-0.168736, -0.331264, 0.5],
        [0.5, -0.418688, -0.081312],
    ]
)


def rgb_to_yuv(frame: np.ndarray) -> np.ndarray:
    """Convert a (3, H, W) RGB frame in [0, 1] to YCbCr with 0.5-offset chroma."""
    if frame.ndim != 3 or frame.shape[0] != 3:
        raise DimensionError(f"expected a (3, H, W) frame, got {frame.shape}")
    flat = np.asarray(frame, dtype=np.float64).reshape(3, -1)
    yuv = _RGB_TO_YUV @ flat
    yuv[1:] += 0.5
    return yuv.reshape(frame.shape)


def psnr_yuv_compound(a: np.ndarray, b: np.ndarray) -> float:
    """Compound luma-weighted PSNR: (6 * PSNR_Y + PSNR_U + PSNR_V) / 8."""
    ya, yb = rgb_to_yuv(a), rgb_to_yuv(b)
    parts = [psnr_rgb(ya[c], yb[c]) for c in range(3)]
    return (6.0 * parts[0] + parts[1] + parts[2]) / 8.0


def _prepare_curve(points, name: str):
    if len(points) < 4:
        raise ContractError(f"{name} curve needs at least 4 points, got {len(points)}")
    pts = sorted(points, key=lambda p: p.bpp)
    rates = np.array([p.bpp for p in pts], dtype=np.float64)
    quals = np.array([p.quality for p in pts], dtype=np.float64)
    if np.any(rates <= 0):
        raise ContractError(f"{name} curve has non-positive rates")
    if np.any(np.diff(quals) <= 0):
        raise ContractError(f"{name} curve quality is not strictly increasing with rate")
    return quals, np.log(rates)


def bd_rate(anchor, test) -> float:
    """Average percent rate difference of ``test`` against ``anchor``.

    Each curve's log-rate is fit with a cubic polynomial in quality and the
    difference is averaged (by exact polynomial integration) over the
    overlapping quality interval. Negative means the test codec spends fewer
    bits at equal quality.
    """
    qa, ra = _prepare_curve(anchor, "anchor")
    qt, rt = _prepare_curve(test, "test")
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    if hi <= lo:
        raise ContractError("curves do not overlap in quality")
    pa = np.polyfit(qa, ra, 3)
    pt = np.polyfit(qt, rt, 3)
    ia = np.polyint(pa)
    it = np.polyint(pt)
    int_a = np.polyval(ia, hi) - np.polyval(ia, lo)
    int_t = np.polyval(it, hi) - np.polyval(it, lo)
    avg_diff = (int_t - int_a) / (hi - lo)
    return float((np.exp(avg_diff) - 1.0) * 100.0)
