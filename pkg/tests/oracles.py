"""Independent reference implementations used to check the package.

Everything here is deliberately written the slow, obvious way (scalar loops,
explicit formulas, generic quadrature) and never calls into the package's
compute paths, so a test comparing the two is a genuine dual-route check.
"""

from __future__ import annotations

import math

import numpy as np

import ctxcodec.tensor as T


def conv2d_ref(x, w, b, stride=1, pad=0):
    """Nested-loop cross-correlation, float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    n, cin, h, wid = x.shape
    cout, _, k, _ = w.shape
    ho = (h + 2 * pad - k) // stride + 1
    wo = (wid + 2 * pad - k) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.zeros((n, cout, ho, wo))
    for ni in range(n):
        for co in range(cout):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0 if b is None else float(b[co])
                    for ci in range(cin):
                        for u in range(k):
                            for v in range(k):
                                acc += w[co, ci, u, v] * xp[ni, ci, i * stride + u, j * stride + v]
                    out[ni, co, i, j] = acc
    return out


def sigmoid_ref(x):
    """Scalar-loop logistic."""
    flat = np.asarray(x, dtype=np.float64).reshape(-1)
    out = np.array([1.0 / (1.0 + math.exp(-v)) for v in flat])
    return out.reshape(np.shape(x))


def gate_ref(context, maps):
    c = np.asarray(context, dtype=np.float64)
    m = np.asarray(maps, dtype=np.float64)
    out = np.zeros_like(c)
    it = np.nditer(c, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        out[idx] = c[idx] * m[idx]
    return out


def bilinear_warp_ref(feature, flow):
    """Per-pixel bilinear sampling with border clamping."""
    f = np.asarray(feature, dtype=np.float64)
    fl = np.asarray(flow, dtype=np.float64)
    n, c, h, w = f.shape
    out = np.zeros_like(f)
    for ni in range(n):
        for y in range(h):
            for x in range(w):
                px = min(max(x + fl[ni, 0, y, x], 0.0), w - 1.0)
                py = min(max(y + fl[ni, 1, y, x], 0.0), h - 1.0)
                x0 = min(int(math.floor(px)), w - 1)
                y0 = min(int(math.floor(py)), h - 1)
                x1 = min(x0 + 1, w - 1)
                y1 = min(y0 + 1, h - 1)
                wx = px - x0
                wy = py - y0
                for ci in range(c):
                    out[ni, ci, y, x] = (
                        f[ni, ci, y0, x0] * (1 - wy) * (1 - wx)
                        + f[ni, ci, y0, x1] * (1 - wy) * wx
                        + f[ni, ci, y1, x0] * wy * (1 - wx)
                        + f[ni, ci, y1, x1] * wy * wx
                    )
    return out


def svf_ref(feature, taps, k):
    """Brute force over (i, j, c, u, v) with zero padding; taps N x k*k x H x W."""
    f = np.asarray(feature, dtype=np.float64)
    t = np.asarray(taps, dtype=np.float64)
    n, c, h, w = f.shape
    r = k // 2
    out = np.zeros_like(f)
    for ni in range(n):
        for ci in range(c):
            for i in range(h):
                for j in range(w):
                    acc = 0.0
                    for u in range(-r, r + 1):
                        for v in range(-r, r + 1):
                            ii, jj = i + u, j + v
                            if 0 <= ii < h and 0 <= jj < w:
                                chan = (u + r) * k + (v + r)
                                acc += t[ni, chan, i, j] * f[ni, ci, ii, jj]
                    out[ni, ci, i, j] = acc
    return out


def laplace_bits_ref(v, mu, b):
    """Closed-form interval mass cost with the package's clamps re-derived."""
    b = max(float(b), 1e-3)
    d = float(v) - float(mu)

    def cdf(u):
        if u < 0:
            return 0.5 * math.exp(u / b)
        return 1.0 - 0.5 * math.exp(-u / b)

    p = cdf(d + 0.5) - cdf(d - 0.5)
    p = min(max(p, 2.0 ** -16), 1.0)
    return -math.log2(p)


# ---------------------------------------------------------------------------
# gradient checking


def finite_diff_check(build, tensors, h=1e-4, tol=1e-4):
    """Compare analytic gradients with central differences in float64.

    ``build`` maps the tensors to a scalar loss tensor; the check runs per
    element of every tensor and reports the worst relative error, where the
    error is |analytic - numeric| / max(1, |analytic|, |numeric|).
    """
    for t in tensors:
        assert t.data.dtype == np.float64, "gradient checks require float64 mode"
        t.requires_grad = True
        t.grad = None
    with T.Tape() as tape:
        loss = build(*tensors)
    tape.backward(loss)
    grads = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    worst = 0.0
    for t, g in zip(tensors, grads):
        flat = t.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            with T.Tape():
                up = build(*tensors).item()
            flat[i] = keep - h
            with T.Tape():
                down = build(*tensors).item()
            flat[i] = keep
            numeric = (up - down) / (2 * h)
            denom = max(1.0, abs(gflat[i]), abs(numeric))
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst


# ---------------------------------------------------------------------------
# rate-curve quadrature


def bd_rate_quadrature_ref(anchor, test, samples=10_000):
    """BD-rate via manual Vandermonde least squares and trapezoid quadrature."""

    def fit(points):
        pts = sorted(points, key=lambda p: p.bpp)
        q = np.array([p.quality for p in pts], dtype=np.float64)
        r = np.log([p.bpp for p in pts])
        vand = np.stack([q ** 3, q ** 2, q, np.ones_like(q)], axis=1)
        coef, *_ = np.linalg.lstsq(vand, r, rcond=None)
        return q, coef

    qa, ca = fit(anchor)
    qt, ct = fit(test)
    lo = max(qa.min(), qt.min())
    hi = min(qa.max(), qt.max())
    grid = np.linspace(lo, hi, samples)

    def evaluate(coef, q):
        return coef[0] * q ** 3 + coef[1] * q ** 2 + coef[2] * q + coef[3]

    diff = evaluate(ct, grid) - evaluate(ca, grid)
    avg = np.trapezoid(diff, grid) / (hi - lo)
    return float((math.exp(avg) - 1.0) * 100.0)
