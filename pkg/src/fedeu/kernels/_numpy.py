"""Pure-numpy reference kernels.

Every function here has a twin with the same signature in ``_numba``.
"""
import numpy as np

_LANCZOS_G = 7.0
_LANCZOS_COEF = np.array([
    0.99999999999980993,
    676.5203681218851,
    -1259.1392167224028,
    771.32342877765313,
    -176.61502916214059,
    12.507343278686905,
    -0.13857109526572012,
    9.9843695780195716e-6,
    1.5056327351493116e-7,
])
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
_SHIFT = 10


def im2col(x, kh, kw, stride, pad):
    """Patch matrix of shape (C*kh*kw, B*Ho*Wo), channel-major rows."""
    b, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    xp = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, b, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]
    return cols.reshape(c * kh * kw, b * ho * wo)


def col2im(cols, x_shape, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patches back to [B, C, H, W]."""
    b, c, h, w = x_shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = cols.reshape(c, kh, kw, b, ho, wo)
    xp = np.zeros((c, b, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, i, j]
    xp = xp.transpose(1, 0, 2, 3)
    return np.ascontiguousarray(xp[:, :, pad:pad + h, pad:pad + w])


def upsample_backward(g, factor):
    """Sum each factor x factor block of ``g`` [B, C, fH, fW] -> [B, C, H, W]."""
    out = g[:, :, 0::factor, 0::factor].copy()
    for i in range(factor):
        for j in range(factor):
            if i or j:
                out += g[:, :, i::factor, j::factor]
    return out


def lgamma(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    small = x < 0.5
    # reflection for x < 0.5
    if small.any():
        xs = x[small]
        out[small] = np.log(np.pi / np.abs(np.sin(np.pi * xs))) - lgamma(1.0 - xs)
    xl = x[~small] - 1.0
    acc = np.full_like(xl, _LANCZOS_COEF[0])
    for i in range(1, 9):
        acc += _LANCZOS_COEF[i] / (xl + i)
    t = xl + _LANCZOS_G + 0.5
    out[~small] = _HALF_LOG_2PI + (xl + 0.5) * np.log(t) - t + np.log(acc)
    # exact zeros that Lanczos only approximates
    out[(x == 1.0) | (x == 2.0)] = 0.0
    return out


def digamma(x):
    x = np.array(x, dtype=np.float64)
    acc = np.zeros_like(x)
    for _ in range(_SHIFT):
        m = x < _SHIFT
        acc = np.where(m, acc - 1.0 / x, acc)
        x = np.where(m, x + 1.0, x)
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (
        1.0 / 240 - inv2 * (1.0 / 132 - inv2 * 691.0 / 32760)))))
    return acc + np.log(x) - 0.5 * inv - series


def trigamma(x):
    x = np.array(x, dtype=np.float64)
    acc = np.zeros_like(x)
    for _ in range(_SHIFT):
        m = x < _SHIFT
        acc = np.where(m, acc + 1.0 / (x * x), acc)
        x = np.where(m, x + 1.0, x)
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv + 0.5 * inv2 + inv * inv2 * (1.0 / 6 - inv2 * (1.0 / 30 - inv2 * (
        1.0 / 42 - inv2 * (1.0 / 30 - inv2 * (5.0 / 66 - inv2 * 691.0 / 2730)))))
    return acc + series


def topk_mean(rows, k):
    rows = np.asarray(rows, dtype=np.float64)
    if k >= rows.shape[1]:
        return rows.mean(axis=1)
    top = -np.partition(-rows, k - 1, axis=1)[:, :k]
    return np.sort(top, axis=1)[:, ::-1].sum(axis=1) / k
