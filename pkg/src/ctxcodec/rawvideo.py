"""Raw planar RGB8 video files with a text sidecar descriptor.

The payload is frame-major, plane-major bytes (R plane, G plane, B plane per
frame); the sidecar is `key = value` text carrying width, height, frames and
fps. Loads normalize to [0, 1] floats; writes round to the 8-bit grid, so a
write/read round trip is bit-identical.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import FormatError

SIDE_CAR_SUFFIX = ".meta"


def sidecar_path(path) -> str:
    return str(path) + SIDE_CAR_SUFFIX


def write_raw_video(path, frames: np.ndarray, fps: float = 30.0, sidecar=None):
    """Write (F, 3, H, W) frames in [0, 1] plus the sidecar descriptor."""
    frames = np.asarray(frames)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise FormatError(f"expected (F, 3, H, W) frames, got {frames.shape}")
    f, _, h, w = frames.shape
    data = np.floor(np.clip(frames, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(data.tobytes())
    lines = [f"width = {w}", f"height = {h}", f"frames = {f}", f"fps = {fps:g}", ""]
    with open(sidecar or sidecar_path(path), "w") as fh:
        fh.write("\n".join(lines))


def _parse_sidecar(path) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise FormatError(f"cannot read sidecar {path}: {exc}") from exc
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    for key in ("width", "height", "frames"):
        if key not in values:
            raise FormatError(f"{path}: sidecar is missing {key!r}")
        try:
            values[key] = int(values[key])
        except ValueError as exc:
            raise FormatError(f"{path}: {key} is not an integer") from exc
    values["fps"] = float(values.get("fps", 30.0))
    return values


def load_raw_video(path, sidecar=None):
    """Load a raw file; returns ((F, 3, H, W) float32 frames, fps).

    The byte count must match the sidecar exactly, and extents must be
    multiples of 16 (the codec's extent contract); violations raise
    FormatError naming the mismatch.
    """
    meta = _parse_sidecar(sidecar or sidecar_path(path))
    w, h, count = meta["width"], meta["height"], meta["frames"]
    if w % 16 or h % 16:
        raise FormatError(
            f"{path}: extents {w}x{h} are not multiples of 16; "
            f"crop to {w - w % 16}x{h - h % 16} first"
        )
    expected = count * 3 * h * w
    actual = os.path.getsize(path)
    if actual != expected:
        raise FormatError(
            f"{path}: expected {expected} bytes for {count} frames of {w}x{h}, found {actual}"
        )
    data = np.fromfile(path, dtype=np.uint8).reshape(count, 3, h, w)
    return data.astype(np.float32) / np.float32(255.0), meta["fps"]
