"""Dense channels-first tensor math with reverse-mode automatic differentiation.

Every differentiable operation the codec needs lives here. Tensors wrap numpy
arrays in N x C x H x W layout (or degenerate forms such as per-channel vectors
and scalars); operations record backward closures on an explicit :class:`Tape`,
and ``Tape.backward`` replays the records in exact reverse execution order.

Two precisions exist: float32 for training and float64 for verification, so
oracle comparisons can use 1e-12 tolerances. The active default applies to
newly created leaf tensors; operations inherit the dtype of their inputs.
Reductions delegate to numpy's fixed pairwise summation, which is
deterministic for a given shape, so two executions of the same graph produce
bit-identical results within one precision mode.

There is no broadcasting beyond size-1 scalars and explicit per-channel
expansion, no views, and no GPU path.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import ContractError, DimensionError

_FLOAT_DTYPES = (np.float32, np.float64)
_DEFAULT_DTYPE = np.float32
_ACTIVE_TAPE: "Tape | None" = None


def default_dtype():
    """Dtype given to newly created leaf tensors."""
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(name: str):
    """Temporarily switch the default leaf dtype ('float32' or 'float64')."""
    global _DEFAULT_DTYPE
    table = {"float32": np.float32, "float64": np.float64}
    if name not in table:
        raise ContractError(f"unknown precision {name!r}")
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = table[name]
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


class Tensor:
    """A dense real array plus an optional gradient produced by backward()."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError("item() needs a single-element tensor")
        return float(self.data.reshape(())[()])

    def detach(self) -> "Tensor":
        """A copy that does not participate in gradient recording."""
        return _make(self.data.copy())

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"

    # Operator sugar; python scalars become constant tensors.
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return mul(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return neg(self)


def _make(arr: np.ndarray) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = arr
    out.grad = None
    out.requires_grad = False
    return out


def _coerce(value, dtype=None) -> np.ndarray:
    """Explicit float arrays keep their dtype; everything else follows the default."""
    if dtype is not None:
        return np.asarray(value, dtype=dtype)
    if isinstance(value, np.ndarray) and value.dtype in _FLOAT_DTYPES:
        return value
    return np.asarray(value, dtype=_DEFAULT_DTYPE)


def _as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return _make(_coerce(value, dtype))


def constant(value, dtype=None) -> Tensor:
    """Wrap a python scalar or array as a non-differentiable tensor."""
    return _as_tensor(value, dtype)


class Tape:
    """Ordered record of executed operations for one backward pass.

    Use as a context manager around the forward computation; while active,
    operations with gradient-requiring inputs append themselves. ``backward``
    may be called once, inside or after the ``with`` block.
    """

    def __init__(self):
        self._nodes = []
        self._used = False

    def __enter__(self):
        global _ACTIVE_TAPE
        if _ACTIVE_TAPE is not None:
            raise ContractError("a tape is already active; tapes do not nest")
        _ACTIVE_TAPE = self
        return self

    def __exit__(self, exc_type, exc, tb):
        global _ACTIVE_TAPE
        _ACTIVE_TAPE = None
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, loss: Tensor):
        """Populate .grad on every recorded tensor reachable from ``loss``.

        The loss must be scalar and the tape must not have been consumed by a
        previous backward call.
        """
        if loss.data.size != 1:
            raise ContractError("backward requires a scalar loss")
        if self._used:
            raise ContractError("backward was already called on this tape")
        self._used = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        keep: dict[int, Tensor] = {id(loss): loss}
        for out, inputs, backward_fn in reversed(self._nodes):
            g = grads.pop(id(out), None)
            if g is None:
                continue
            out.grad = g
            for t, gi in zip(inputs, backward_fn(g)):
                if gi is None or not t.requires_grad:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    keep[key] = t
        for key, t in keep.items():
            if key in grads:
                t.grad = grads[key]


def active_tape() -> "Tape | None":
    return _ACTIVE_TAPE


def backward(loss: Tensor):
    """Run backward on the currently active tape."""
    if _ACTIVE_TAPE is None:
        raise ContractError("backward called with no active tape")
    _ACTIVE_TAPE.backward(loss)


def _record(out: Tensor, inputs, backward_fn) -> Tensor:
    tape = _ACTIVE_TAPE
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape._nodes.append((out, tuple(inputs), backward_fn))
    return out


def _check_same_dtype(*tensors):
    dt = tensors[0].dtype
    for t in tensors[1:]:
        if t.dtype != dt:
            raise DimensionError(f"mixed dtypes {dt} vs {t.dtype}")
    return dt


def _binary_shapes(a: Tensor, b: Tensor):
    """Same shape, or one side is a single element (scalar broadcast)."""
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise DimensionError(f"shape mismatch {a.shape} vs {b.shape}")


def _reduce_like(grad: np.ndarray, ref: Tensor) -> np.ndarray:
    if grad.shape == ref.data.shape:
        return grad
    return np.sum(grad, dtype=grad.dtype).reshape(ref.data.shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_dtype(a, b)
    _binary_shapes(a, b)
    out = _make(a.data + b.data)

    def bwd(g):
        return _reduce_like(g, a), _reduce_like(g, b)

    return _record(out, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_dtype(a, b)
    _binary_shapes(a, b)
    out = _make(a.data - b.data)

    def bwd(g):
        return _reduce_like(g, a), _reduce_like(-g, b)

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_dtype(a, b)
    _binary_shapes(a, b)
    out = _make(a.data * b.data)

    def bwd(g):
        return _reduce_like(g * b.data, a), _reduce_like(g * a.data, b)

    return _record(out, (a, b), bwd)


def neg(x: Tensor) -> Tensor:
    out = _make(-x.data)

    def bwd(g):
        return (-g,)

    return _record(out, (x,), bwd)


def exp(x: Tensor) -> Tensor:
    y = np.exp(x.data)
    out = _make(y)

    def bwd(g):
        return (g * y,)

    return _record(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    """Elementwise 1/(1+exp(-x)), computed in the overflow-free branch."""
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = _make(y)

    def bwd(g):
        return (g * y * (1.0 - y),)

    return _record(out, (x,), bwd)


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    d = x.data
    y = np.where(d >= 0, d, d * d.dtype.type(slope))
    out = _make(y)

    def bwd(g):
        return (np.where(d >= 0, g, g * g.dtype.type(slope)),)

    return _record(out, (x,), bwd)


def clamp(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; gradient passes through the closed interval."""
    d = x.data
    y = np.clip(d, lo, hi)
    out = _make(y)

    def bwd(g):
        mask = (d >= lo) & (d <= hi)
        return (np.where(mask, g, g.dtype.type(0.0)),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# shape ops


def concat_channels(tensors) -> Tensor:
    """Concatenate N x C_i x H x W tensors along the channel axis."""
    tensors = [_as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat_channels needs at least one tensor")
    _check_same_dtype(*tensors)
    first = tensors[0]
    if first.data.ndim != 4:
        raise DimensionError("concat_channels expects 4-d tensors")
    for t in tensors[1:]:
        if t.data.ndim != 4 or t.shape[0] != first.shape[0] or t.shape[2:] != first.shape[2:]:
            raise DimensionError(f"incompatible shapes {first.shape} vs {t.shape}")
    out = _make(np.concatenate([t.data for t in tensors], axis=1))
    sizes = [t.shape[1] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(sizes)))

    return _record(out, tensors, bwd)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    if x.data.ndim != 4:
        raise DimensionError("slice_channels expects a 4-d tensor")
    if not (0 <= start < stop <= x.shape[1]):
        raise DimensionError(f"channel slice [{start}:{stop}] out of range for C={x.shape[1]}")
    out = _make(x.data[:, start:stop].copy())

    def bwd(g):
        full = np.zeros_like(x.data)
        full[:, start:stop] = g
        return (full,)

    return _record(out, (x,), bwd)


def crop_spatial(x: Tensor, h: int, w: int) -> Tensor:
    """Keep the top-left h x w window of a 4-d tensor."""
    if x.data.ndim != 4:
        raise DimensionError("crop_spatial expects a 4-d tensor")
    if h > x.shape[2] or w > x.shape[3]:
        raise DimensionError(f"cannot crop {x.shape} to {h}x{w}")
    out = _make(x.data[:, :, :h, :w].copy())

    def bwd(g):
        full = np.zeros_like(x.data)
        full[:, :, :h, :w] = g
        return (full,)

    return _record(out, (x,), bwd)


def expand_channelwise(param: Tensor, n: int, h: int, w: int) -> Tensor:
    """Broadcast a per-channel vector (C,) to shape (n, C, h, w)."""
    if param.data.ndim != 1:
        raise DimensionError("expand_channelwise expects a 1-d per-channel vector")
    c = param.shape[0]
    out = _make(np.broadcast_to(param.data[None, :, None, None], (n, c, h, w)).copy())

    def bwd(g):
        return (g.sum(axis=(0, 2, 3)),)

    return _record(out, (param,), bwd)


# ---------------------------------------------------------------------------
# pooling / resampling


def avg_pool2(x: Tensor) -> Tensor:
    """Average pooling by 2 in both spatial dimensions (extents must be even)."""
    if x.data.ndim != 4:
        raise DimensionError("avg_pool2 expects a 4-d tensor")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2 needs even extents, got {h}x{w}")
    blocks = x.data.reshape(n, c, h // 2, 2, w // 2, 2)
    out = _make(blocks.mean(axis=(3, 5)))

    def bwd(g):
        q = (g * g.dtype.type(0.25))[:, :, :, None, :, None]
        return (np.broadcast_to(q, (n, c, h // 2, 2, w // 2, 2)).reshape(n, c, h, w).copy(),)

    return _record(out, (x,), bwd)


def nearest_upsample2(x: Tensor) -> Tensor:
    """Nearest-neighbour upsampling by 2 in both spatial dimensions."""
    if x.data.ndim != 4:
        raise DimensionError("nearest_upsample2 expects a 4-d tensor")
    n, c, h, w = x.shape
    out = _make(np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3))

    def bwd(g):
        return (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _record(out, (x,), bwd)


# ---------------------------------------------------------------------------
# reductions


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the operation name
    out = _make(np.sum(x.data).reshape(()))

    def bwd(g):
        return (np.full_like(x.data, g.reshape(())[()]),)

    return _record(out, (x,), bwd)


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    out = _make((np.sum(x.data) / n).reshape(()))

    def bwd(g):
        return (np.full_like(x.data, g.reshape(())[()] / n),)

    return _record(out, (x,), bwd)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean of squared differences over all elements."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise DimensionError(f"mse shape mismatch {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = _make((np.sum(diff * diff) / n).reshape(()))

    def bwd(g):
        scale = g.reshape(())[()] * 2.0 / n
        return (diff * scale, diff * (-scale))

    return _record(out, (a, b), bwd)


# ---------------------------------------------------------------------------
# convolution


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of N x Cin x H x W input with Cout x Cin x k x k weights.

    Zero padding, square odd kernels, output extent floor((H+2p-k)/s)+1.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError("conv2d expects 4-d input and weight")
    n, cin, h, w = x.shape
    cout, cin_w, kh, kw = weight.shape
    if cin != cin_w:
        raise DimensionError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"conv2d needs square odd kernels, got {kh}x{kw}")
    if stride < 1:
        raise ContractError("conv2d stride must be positive")
    if pad < 0:
        raise ContractError("conv2d pad must be nonnegative")
    if h + 2 * pad < kh or w + 2 * pad < kw:
        raise DimensionError(f"conv2d input {h}x{w} with pad {pad} smaller than kernel {kh}")
    if bias is not None and bias.shape != (cout,):
        raise DimensionError(f"conv2d bias shape {bias.shape} != ({cout},)")
    if bias is not None:
        _check_same_dtype(x, weight, bias)
    else:
        _check_same_dtype(x, weight)

    k, s, p = kh, stride, pad
    ho = (h + 2 * p - k) // s + 1
    wo = (w + 2 * p - k) // s + 1

    if p > 0:
        xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    else:
        xp = np.ascontiguousarray(x.data)
    sn, sc, sh, sw = xp.strides
    patches = np.lib.stride_tricks.as_strided(
        xp,
        shape=(n, cin, k, k, ho, wo),
        strides=(sn, sc, sh, sw, s * sh, s * sw),
        writeable=False,
    )
    cols = patches.reshape(n, cin * k * k, ho * wo)
    w2 = weight.data.reshape(cout, cin * k * k)
    y = np.matmul(w2, cols)  # (n, cout, ho*wo)
    if bias is not None:
        y = y + bias.data[None, :, None]
    out = _make(np.ascontiguousarray(y.reshape(n, cout, ho, wo)))

    def bwd(g):
        g2 = g.reshape(n, cout, ho * wo)
        grad_w = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        grad_b = g.sum(axis=(0, 2, 3)) if bias is not None else None
        cols_g = np.matmul(w2.T, g2).reshape(n, cin, k, k, ho, wo)
        gx_pad = np.zeros((n, cin, h + 2 * p, w + 2 * p), dtype=g.dtype)
        for u in range(k):
            for v in range(k):
                gx_pad[:, :, u:u + s * ho:s, v:v + s * wo:s] += cols_g[:, :, u, v]
        grad_x = gx_pad[:, :, p:p + h, p:p + w] if p > 0 else gx_pad
        if bias is not None:
            return grad_x, grad_w, grad_b
        return grad_x, grad_w

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _record(out, inputs, bwd)


# ---------------------------------------------------------------------------
# warping


def bilinear_warp(feature: Tensor, flow: Tensor) -> Tensor:
    """Bilinear sampling of ``feature`` at positions shifted by ``flow``.

    Flow is N x 2 x H x W in pixel units, channel 0 = dx, channel 1 = dy.
    Sample positions clamp to the border, so zero flow is exactly the
    identity. Differentiable with respect to both operands.
    """
    if feature.data.ndim != 4 or flow.data.ndim != 4:
        raise DimensionError("bilinear_warp expects 4-d tensors")
    n, c, h, w = feature.shape
    if flow.shape != (n, 2, h, w):
        raise DimensionError(f"flow shape {flow.shape} != ({n}, 2, {h}, {w})")
    _check_same_dtype(feature, flow)
    dt = feature.data.dtype

    xs = np.arange(w, dtype=dt)[None, None, :]
    ys = np.arange(h, dtype=dt)[None, :, None]
    px = np.clip(xs + flow.data[:, 0], 0.0, w - 1.0)  # (n, h, w)
    py = np.clip(ys + flow.data[:, 1], 0.0, h - 1.0)
    # Interior mask before clipping: border-clamped samples have zero flow grad.
    in_x = (xs + flow.data[:, 0] > 0.0) & (xs + flow.data[:, 0] < w - 1.0)
    in_y = (ys + flow.data[:, 1] > 0.0) & (ys + flow.data[:, 1] < h - 1.0)

    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    x0 = np.minimum(x0, w - 1)
    y0 = np.minimum(y0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = (px - x0).astype(dt)
    wy = (py - y0).astype(dt)

    flat = feature.data.reshape(n, c, h * w)
    i00 = (y0 * w + x0).reshape(n, 1, h * w)
    i01 = (y0 * w + x1).reshape(n, 1, h * w)
    i10 = (y1 * w + x0).reshape(n, 1, h * w)
    i11 = (y1 * w + x1).reshape(n, 1, h * w)
    v00 = np.take_along_axis(flat, np.broadcast_to(i00, (n, c, h * w)), axis=2)
    v01 = np.take_along_axis(flat, np.broadcast_to(i01, (n, c, h * w)), axis=2)
    v10 = np.take_along_axis(flat, np.broadcast_to(i10, (n, c, h * w)), axis=2)
    v11 = np.take_along_axis(flat, np.broadcast_to(i11, (n, c, h * w)), axis=2)

    wxf = wx.reshape(n, 1, h * w)
    wyf = wy.reshape(n, 1, h * w)
    w00 = (1 - wyf) * (1 - wxf)
    w01 = (1 - wyf) * wxf
    w10 = wyf * (1 - wxf)
    w11 = wyf * wxf
    y = w00 * v00 + w01 * v01 + w10 * v10 + w11 * v11
    out = _make(np.ascontiguousarray(y.reshape(n, c, h, w)))

    def bwd(g):
        gf = g.reshape(n, c, h * w)
        grad_feat = np.zeros((n, c, h * w), dtype=g.dtype)
        idx = np.broadcast_to(np.arange(n)[:, None, None], (n, c, h * w))
        ch = np.broadcast_to(np.arange(c)[None, :, None], (n, c, h * w))
        for ii, ww in ((i00, w00), (i01, w01), (i10, w10), (i11, w11)):
            np.add.at(grad_feat, (idx, ch, np.broadcast_to(ii, (n, c, h * w))), gf * ww)
        grad_feat = grad_feat.reshape(n, c, h, w)

        # d(out)/d(px) = (1-wy)(v01-v00) + wy(v11-v10), summed over channels.
        dpx = ((1 - wyf) * (v01 - v00) + wyf * (v11 - v10)) * gf
        dpy = ((1 - wxf) * (v10 - v00) + wxf * (v11 - v01)) * gf
        gx = dpx.sum(axis=1).reshape(n, h, w) * in_x
        gy = dpy.sum(axis=1).reshape(n, h, w) * in_y
        grad_flow = np.stack([gx, gy], axis=1)
        return grad_feat, grad_flow

    return _record(out, (feature, flow), bwd)


# ---------------------------------------------------------------------------
# quantization helpers


def round_half_away(arr: np.ndarray) -> np.ndarray:
    """Round to nearest integer with halves away from zero (plain numpy)."""
    return np.sign(arr) * np.floor(np.abs(arr) + 0.5)


def quantize_round(x: Tensor) -> Tensor:
    """Inference quantization: round half away from zero. Not differentiable."""
    return _make(round_half_away(x.data))


def quantize_noise(x: Tensor, rng: np.random.Generator) -> Tensor:
    """Training surrogate: add uniform noise in [-0.5, 0.5); identity gradient."""
    noise = rng.uniform(-0.5, 0.5, size=x.shape).astype(x.dtype)
    out = _make(x.data + noise)

    def bwd(g):
        return (g,)

    return _record(out, (x,), bwd)
