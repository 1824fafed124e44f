"""Reference-adaptive spatially variant filtering.

A single convolution over the previously reconstructed frame produces one
k x k filter per output position. Applying the bank to an intermediate codec
feature lets the transforms adjust per position to the quality of the
reference: the same filter is shared across feature channels, taps are not
normalized (so the bank can amplify as well as smooth), and a bank of delta
filters is an exact no-op.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, DimensionError
from .tensor import Tensor, _make, _record

FILTER_SIZE = 3


@dataclass
class FilterBank:
    """Per-position filters stored as N x k*k x H x W; channel u*k+v holds tap (u, v)."""

    taps: Tensor
    k: int

    @property
    def spatial(self):
        return self.taps.shape[2], self.taps.shape[3]

    def as_grid(self) -> np.ndarray:
        """View of batch element 0 as H x W x k x k, for dumps and inspection."""
        n, kk, h, w = self.taps.shape
        return self.taps.data[0].reshape(self.k, self.k, h, w).transpose(2, 3, 0, 1).copy()


def delta_bank(n: int, h: int, w: int, k: int = FILTER_SIZE, dtype=None) -> FilterBank:
    """A bank whose filters are all center-tap deltas; filtering with it is the identity."""
    taps = np.zeros((n, k * k, h, w), dtype=dtype or T.default_dtype())
    center = (k // 2) * k + (k // 2)
    taps[:, center] = 1.0
    return FilterBank(taps=T.constant(taps), k=k)


def generate_filters(reference_frame: Tensor, weight: Tensor, bias: Tensor, stride: int) -> FilterBank:
    """Predict a filter bank from the reference frame.

    The generating convolution maps 3 channels to k*k, kernel 3x3, pad 1,
    with stride 1 (full-resolution placement) or 2 (placement after the first
    downsampling stage), so the bank's extent matches the feature it will be
    applied to.
    """
    if stride not in (1, 2):
        raise ContractError(f"filter generator stride must be 1 or 2, got {stride}")
    if reference_frame.data.ndim != 4 or reference_frame.shape[1] != 3:
        raise DimensionError("generate_filters expects an N x 3 x H x W reference frame")
    kk = weight.shape[0]
    k = int(round(kk ** 0.5))
    if k * k != kk or k % 2 == 0:
        raise DimensionError(f"filter generator emits {kk} channels, not an odd square")
    taps = T.conv2d(reference_frame, weight, bias, stride=stride, pad=1)
    return FilterBank(taps=taps, k=k)


def svf_apply(feature: Tensor, bank: FilterBank) -> Tensor:
    """Spatially variant filtering of a feature with a per-position bank.

    out(i, j, c) = sum_{u,v} taps(i, j, u, v) * feature(i+u, j+v, c) with
    offsets in [-k//2, k//2], zero padding at the borders, and the filter at
    each position shared across all channels.
    """
    if feature.data.ndim != 4:
        raise DimensionError("svf_apply expects a 4-d feature")
    taps = bank.taps
    n, c, h, w = feature.shape
    k = bank.k
    if taps.shape != (n, k * k, h, w):
        raise DimensionError(
            f"bank extent {taps.shape} does not match feature {feature.shape}"
        )
    r = k // 2

    pf = np.pad(feature.data, ((0, 0), (0, 0), (r, r), (r, r)))
    sn, sc, sh, sw = pf.strides
    patches = np.lib.stride_tricks.as_strided(
        pf,
        shape=(n, c, k, k, h, w),
        strides=(sn, sc, sh, sw, sh, sw),
        writeable=False,
    )
    tk = taps.data.reshape(n, k, k, h, w)
    y = np.einsum("ncuvhw,nuvhw->nchw", patches, tk, optimize=True)
    out = _make(np.ascontiguousarray(y))

    def bwd(g):
        grad_taps = np.einsum("nchw,ncuvhw->nuvhw", g, patches, optimize=True)
        grad_pf = np.zeros_like(pf)
        for u in range(k):
            for v in range(k):
                grad_pf[:, :, u:u + h, v:v + w] += g * tk[:, None, u, v]
        grad_feat = grad_pf[:, :, r:r + h, r:r + w]
        return grad_feat, grad_taps.reshape(n, k * k, h, w)

    return _record(out, (feature, taps), bwd)
