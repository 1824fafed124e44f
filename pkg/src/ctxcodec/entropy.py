"""Laplace probability modelling, rate estimation, and the range coder.

The rate model treats every latent element as Laplace-distributed with mean
``mu`` and scale ``b`` (clamped to B_MIN): the probability of an integer v is
the CDF mass on [v-0.5, v+0.5], floored at 2**-16, and the estimated cost is
-log2 of that mass. The same distribution, quantized to a 16-bit cumulative
table with every symbol guaranteed at least one unit of mass, drives a 32-bit
renormalizing byte-oriented range coder, so decode(encode(s)) == s exactly
and measured stream sizes track the quantized-CDF estimate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import DimensionError, FormatError, SymbolRangeError
from .tensor import Tensor, _make, _record

B_MIN = 1e-3
PROB_FLOOR = 2.0 ** -16
ALPHABET_MIN = -255
ALPHABET_MAX = 255
NUM_SYMBOLS = ALPHABET_MAX - ALPHABET_MIN + 1  # 511
CDF_TOTAL = 1 << 16

_LN2 = float(np.log(2.0))


@dataclass
class LaplaceParams:
    """Mean and scale arrays for a latent; scale is clamped to B_MIN on build."""

    mu: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.b = np.maximum(np.asarray(self.b, dtype=np.float64), B_MIN)
        if self.mu.shape != self.b.shape:
            raise DimensionError(f"mu shape {self.mu.shape} != b shape {self.b.shape}")


def _laplace_cdf(u: np.ndarray, b: np.ndarray) -> np.ndarray:
    """CDF of a zero-mean Laplace at u, elementwise (overflow-free)."""
    tail = 0.5 * np.exp(-np.abs(u) / b)
    return np.where(u < 0, tail, 1.0 - tail)


def laplace_bits(v: Tensor, mu: Tensor, b: Tensor) -> Tensor:
    """Elementwise -log2 of the Laplace interval mass on [v-0.5, v+0.5].

    The scale is clamped to B_MIN and the mass to [2**-16, 1]. Differentiable
    with respect to v, mu and b away from the clamp boundaries; in training v
    is the noisy quantization surrogate, so its gradient matters too.
    """
    if v.shape != mu.shape or v.shape != b.shape:
        raise DimensionError(f"laplace_bits shapes differ: {v.shape}, {mu.shape}, {b.shape}")
    dt = v.data.dtype
    bc = np.maximum(b.data, dt.type(B_MIN))
    d = v.data - mu.data
    up = d + dt.type(0.5)
    lo = d - dt.type(0.5)
    p = _laplace_cdf(up, bc) - _laplace_cdf(lo, bc)
    pc = np.clip(p, dt.type(PROB_FLOOR), dt.type(1.0))
    out = _make((-np.log(pc) / dt.type(_LN2)).astype(dt))

    def bwd(g):
        live = (p > PROB_FLOOR) & (p < 1.0)
        dbits_dp = np.where(live, -1.0 / (pc * _LN2), 0.0) * g
        # dF/dd is the density; dF/db = -(u / (2 b^2)) * exp(-|u|/b).
        pdf_up = np.exp(-np.abs(up) / bc) / (2.0 * bc)
        pdf_lo = np.exp(-np.abs(lo) / bc) / (2.0 * bc)
        dp_dd = pdf_up - pdf_lo
        dFdb_up = -(up / (2.0 * bc * bc)) * np.exp(-np.abs(up) / bc)
        dFdb_lo = -(lo / (2.0 * bc * bc)) * np.exp(-np.abs(lo) / bc)
        dp_db = np.where(b.data > B_MIN, dFdb_up - dFdb_lo, 0.0)
        gv = (dbits_dp * dp_dd).astype(dt)
        return gv, -gv, (dbits_dp * dp_db).astype(dt)

    return _record(out, (v, mu, b), bwd)


def rate_bits(latent: Tensor, mu: Tensor, b: Tensor) -> Tensor:
    """Total estimated bits of a latent under elementwise Laplace parameters."""
    return T.sum(laplace_bits(latent, mu, b))


def estimate_rate(latent: np.ndarray, params: LaplaceParams) -> float:
    """Non-differentiable rate estimate of an integer latent, in bits."""
    latent = np.asarray(latent, dtype=np.float64)
    if latent.shape != params.mu.shape:
        raise DimensionError(f"latent shape {latent.shape} != params shape {params.mu.shape}")
    if latent.size == 0:
        return 0.0
    d = latent - params.mu
    p = _laplace_cdf(d + 0.5, params.b) - _laplace_cdf(d - 0.5, params.b)
    pc = np.clip(p, PROB_FLOOR, 1.0)
    return float(np.sum(-np.log2(pc)))


# ---------------------------------------------------------------------------
# quantized CDF tables


def quantized_cdf(params: LaplaceParams) -> np.ndarray:
    """16-bit cumulative tables over the alphabet, one row per element.

    Every symbol receives at least one unit of mass (the coder can never
    deadlock on a zero-probability symbol); leftover units after flooring go
    to the largest remainders, ties resolved toward lower symbol values.
    Rows are uint32 arrays of NUM_SYMBOLS + 1 entries from 0 to CDF_TOTAL.
    """
    mu = params.mu.reshape(-1, 1)
    b = params.b.reshape(-1, 1)
    n = mu.shape[0]
    edges = np.arange(ALPHABET_MIN, ALPHABET_MAX + 2, dtype=np.float64) - 0.5
    cdf = _laplace_cdf(edges[None, :] - mu, b)
    pmf = np.diff(cdf, axis=1)
    pmf = np.maximum(pmf, 0.0)
    pmf /= pmf.sum(axis=1, keepdims=True)

    budget = CDF_TOTAL - NUM_SYMBOLS
    scaled = pmf * budget
    base = np.floor(scaled)
    rem = scaled - base
    deficit = (budget - base.sum(axis=1)).astype(np.int64)
    order = np.argsort(-rem, axis=1, kind="stable")
    rank = np.empty((n, NUM_SYMBOLS), dtype=np.int64)
    np.put_along_axis(rank, order, np.broadcast_to(np.arange(NUM_SYMBOLS), (n, NUM_SYMBOLS)).copy(), axis=1)
    freq = base.astype(np.int64) + 1 + (rank < deficit[:, None])

    out = np.zeros((n, NUM_SYMBOLS + 1), dtype=np.uint32)
    out[:, 1:] = np.cumsum(freq, axis=1)
    return out


def quantized_bits(symbols: np.ndarray, cdf_rows: np.ndarray) -> float:
    """Exact -log2 cost of symbols under the quantized tables, in bits."""
    symbols = np.asarray(symbols, dtype=np.int64)
    if symbols.shape[0] != cdf_rows.shape[0]:
        raise DimensionError("one CDF row per symbol is required")
    if symbols.size == 0:
        return 0.0
    idx = symbols - ALPHABET_MIN
    rows = np.arange(symbols.shape[0])
    freq = cdf_rows[rows, idx + 1].astype(np.float64) - cdf_rows[rows, idx].astype(np.float64)
    return float(np.sum(np.log2(CDF_TOTAL) - np.log2(freq)))


# ---------------------------------------------------------------------------
# range coder

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF


class RangeEncoder:
    """Byte-oriented 32-bit renormalizing range encoder. Single use."""

    def __init__(self):
        self._low = 0
        self._range = _MASK32
        self._cache = 0
        self._have_cache = False
        self._ff_run = 0
        self._out = bytearray()
        self._finished = False

    def encode(self, cum_lo: int, freq: int, total: int):
        if freq <= 0:
            raise SymbolRangeError("symbol has zero coded frequency")
        r = self._range // total
        self._low += cum_lo * r
        self._range = r * freq
        while self._range < _TOP:
            self._range <<= 8
            self._shift_low()

    def _shift_low(self):
        if self._low < 0xFF000000 or self._low > _MASK32:
            carry = self._low >> 32
            if self._have_cache:
                self._out.append((self._cache + carry) & 0xFF)
                if self._ff_run:
                    fill = (0xFF + carry) & 0xFF
                    self._out.extend(bytes([fill]) * self._ff_run)
                    self._ff_run = 0
            self._cache = (self._low >> 24) & 0xFF
            self._have_cache = True
        else:
            self._ff_run += 1
        self._low = (self._low & 0xFFFFFF) << 8

    def finish(self) -> bytes:
        if self._finished:
            raise SymbolRangeError("encoder already finished")
        self._finished = True
        for _ in range(5):
            self._shift_low()
        return bytes(self._out)


class RangeDecoder:
    """Counterpart of :class:`RangeEncoder`; raises FormatError on truncation."""

    def __init__(self, data: bytes):
        self._data = data
        self._pos = 0
        self._range = _MASK32
        self._code = 0
        for _ in range(4):
            self._code = ((self._code << 8) | self._next_byte()) & _MASK32

    def _next_byte(self) -> int:
        if self._pos >= len(self._data):
            raise FormatError("range-coded payload is truncated")
        b = self._data[self._pos]
        self._pos += 1
        return b

    def decode_cum(self, total: int) -> int:
        self._r = self._range // total
        return min(self._code // self._r, total - 1)

    def advance(self, cum_lo: int, freq: int):
        self._code -= cum_lo * self._r
        self._range = self._r * freq
        while self._range < _TOP:
            self._code = ((self._code << 8) | self._next_byte()) & _MASK32
            self._range <<= 8


def range_encode(symbols: np.ndarray, params: LaplaceParams) -> bytes:
    """Entropy-code integer symbols under per-element Laplace distributions.

    Symbols must already lie in [ALPHABET_MIN, ALPHABET_MAX]; wider values are
    the caller's responsibility to clamp (and count) before coding.
    """
    symbols = np.asarray(symbols).reshape(-1).astype(np.int64)
    if symbols.size != params.mu.size:
        raise DimensionError("one (mu, b) pair per symbol is required")
    if np.any(symbols < ALPHABET_MIN) or np.any(symbols > ALPHABET_MAX):
        raise SymbolRangeError(
            f"symbols outside [{ALPHABET_MIN}, {ALPHABET_MAX}] cannot be coded"
        )
    cdfs = quantized_cdf(params)
    return encode_with_tables(symbols, cdfs)


def range_decode(data: bytes, params: LaplaceParams, count: int) -> np.ndarray:
    """Inverse of :func:`range_encode`; needs the identical parameters."""
    if count != params.mu.size:
        raise DimensionError("count must match the number of (mu, b) pairs")
    cdfs = quantized_cdf(params)
    return decode_with_tables(data, cdfs, count)


def encode_with_tables(symbols: np.ndarray, cdf_rows: np.ndarray) -> bytes:
    enc = RangeEncoder()
    idx = (np.asarray(symbols, dtype=np.int64).reshape(-1) - ALPHABET_MIN)
    lo = cdf_rows[np.arange(idx.size), idx].astype(np.int64)
    hi = cdf_rows[np.arange(idx.size), idx + 1].astype(np.int64)
    for c_lo, c_hi in zip(lo.tolist(), hi.tolist()):
        enc.encode(c_lo, c_hi - c_lo, CDF_TOTAL)
    return enc.finish()


def decode_with_tables(data: bytes, cdf_rows: np.ndarray, count: int) -> np.ndarray:
    dec = RangeDecoder(data)
    out = np.empty(count, dtype=np.int64)
    for i in range(count):
        cum = dec.decode_cum(CDF_TOTAL)
        row = cdf_rows[i]
        sym = int(np.searchsorted(row, cum, side="right")) - 1
        c_lo = int(row[sym])
        c_hi = int(row[sym + 1])
        dec.advance(c_lo, c_hi - c_lo)
        out[i] = sym + ALPHABET_MIN
    return out
