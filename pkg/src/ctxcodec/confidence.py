"""Prediction-confidence gating of temporal contexts.

Multi-scale temporal contexts are predictions of the current frame and their
quality varies both spatially and across channels. Before a context is
injected into the contextual encoder or decoder, a confidence map is computed
for every spatial position of every context channel by comparing the context
with an intermediate feature of the same scale, and the context is gated by
an elementwise product with the map. Encoder and decoder hold separate
gating parameters, so the two sides can value the same prediction
differently.
"""

from __future__ import annotations

from . import tensor as T
from .errors import DimensionError
from .tensor import Tensor

NUM_SCALES = 3


def confidence_maps(context: Tensor, intermediate: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Per-channel confidence of a context at one scale, each value in (0, 1).

    The context (N x M x H x W) is concatenated with an intermediate codec
    feature of the same spatial extent, passed through a single 3x3
    convolution mapping M + C' channels to M, and squashed by a sigmoid; map
    channel m scores context channel m.
    """
    if context.data.ndim != 4 or intermediate.data.ndim != 4:
        raise DimensionError("confidence_maps expects 4-d tensors")
    if context.shape[0] != intermediate.shape[0] or context.shape[2:] != intermediate.shape[2:]:
        raise DimensionError(
            f"context {context.shape} and intermediate {intermediate.shape} disagree spatially"
        )
    m = context.shape[1]
    if weight.shape != (m, m + intermediate.shape[1], 3, 3):
        raise DimensionError(
            f"confidence conv weight {weight.shape} does not map "
            f"{m}+{intermediate.shape[1]} channels to {m}"
        )
    stacked = T.concat_channels([context, intermediate])
    return T.sigmoid(T.conv2d(stacked, weight, bias, stride=1, pad=1))


def gate(context: Tensor, maps: Tensor) -> Tensor:
    """Elementwise product of a context with its confidence maps.

    Shapes must match exactly; gating never amplifies magnitude because maps
    lie in (0, 1).
    """
    if context.shape != maps.shape:
        raise DimensionError(f"gate shape mismatch {context.shape} vs {maps.shape}")
    return T.mul(context, maps)
