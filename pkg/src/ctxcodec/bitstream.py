"""Bit-exact bitstream container.

Layout (little-endian):

  header   magic "CTXC" | version u8 | width u16 | height u16 |
           frame_count u16 | quantization-position f32
  chunk*   kind u8 (0 = intra, 1 = inter) | payload_len u32 | payload

An intra payload is raw 8-bit planar RGB (3*H*W bytes). An inter payload is
four length-prefixed segments in decode order: motion hyper, motion latent,
context hyper, context latent. Parsing never reads past a declared length
and any inconsistency raises FormatError.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

from .errors import FormatError

MAGIC = b"CTXC"
VERSION = 1
KIND_INTRA = 0
KIND_INTER = 1

_HEADER = struct.Struct("<4sBHHHf")
_U32 = struct.Struct("<I")
_CHUNK_HEAD = struct.Struct("<BI")


@dataclass
class StreamHeader:
    width: int
    height: int
    frame_count: int
    q_position: float


class _Reader:
    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0

    def take(self, n: int, what: str) -> bytes:
        if n < 0 or self._pos + n > len(self._data):
            raise FormatError(
                f"truncated stream: need {n} bytes for {what}, "
                f"{len(self._data) - self._pos} left"
            )
        chunk = self._data[self._pos:self._pos + n]
        self._pos += n
        return chunk

    def remaining(self) -> int:
        return len(self._data) - self._pos


def write_stream(header: StreamHeader, chunks) -> bytes:
    """Assemble header plus (kind, payload) chunks into one byte string."""
    if not 0 <= header.frame_count <= 0xFFFF:
        raise FormatError(f"frame count {header.frame_count} does not fit the header")
    if len(chunks) != header.frame_count:
        raise FormatError(
            f"header says {header.frame_count} frames, got {len(chunks)} chunks"
        )
    parts = [
        _HEADER.pack(MAGIC, VERSION, header.width, header.height,
                     header.frame_count, header.q_position)
    ]
    for kind, payload in chunks:
        if kind not in (KIND_INTRA, KIND_INTER):
            raise FormatError(f"unknown chunk kind {kind}")
        parts.append(_CHUNK_HEAD.pack(kind, len(payload)))
        parts.append(payload)
    return b"".join(parts)


def read_stream(data: bytes):
    """Parse a stream; returns (StreamHeader, [(kind, payload)])."""
    r = _Reader(data)
    magic, version, width, height, frame_count, q_pos = _HEADER.unpack(
        r.take(_HEADER.size, "header")
    )
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported stream version {version}")
    if width % 16 or height % 16 or width == 0 or height == 0:
        raise FormatError(f"declared extents {width}x{height} are invalid")
    chunks = []
    for i in range(frame_count):
        kind, length = _CHUNK_HEAD.unpack(r.take(_CHUNK_HEAD.size, f"chunk {i} header"))
        if kind not in (KIND_INTRA, KIND_INTER):
            raise FormatError(f"chunk {i}: unknown kind {kind}")
        payload = r.take(length, f"chunk {i} payload")
        if kind == KIND_INTRA and length != 3 * width * height:
            raise FormatError(
                f"chunk {i}: intra payload is {length} bytes, expected {3 * width * height}"
            )
        chunks.append((kind, payload))
    if r.remaining():
        raise FormatError(f"{r.remaining()} trailing bytes after the declared chunks")
    return StreamHeader(width, height, frame_count, q_pos), chunks


def join_segments(segments) -> bytes:
    """Length-prefix and concatenate the four inter-frame segments."""
    if len(segments) != 4:
        raise FormatError(f"an inter payload has 4 segments, got {len(segments)}")
    parts = []
    for seg in segments:
        parts.append(_U32.pack(len(seg)))
        parts.append(seg)
    return b"".join(parts)


def split_segments(payload: bytes):
    """Inverse of join_segments, with full bounds checking."""
    r = _Reader(payload)
    segments = []
    for i in range(4):
        (length,) = _U32.unpack(r.take(_U32.size, f"segment {i} length"))
        segments.append(r.take(length, f"segment {i}"))
    if r.remaining():
        raise FormatError(f"{r.remaining()} trailing bytes inside an inter payload")
    return segments
