"""numba-compiled kernels, drop-in twins of ``_numpy``."""
import math

import numpy as np
from numba import njit, uint64

from . import _numpy
from ._numpy import _LANCZOS_COEF, _LANCZOS_G, _HALF_LOG_2PI, _SHIFT

_COEF = _LANCZOS_COEF.copy()


# Flat uint64 indexing lets LLVM drop negative-index wraparound checks and
# vectorise the innermost copy. Offsets may transiently wrap below zero; the
# modular sum with ``ox`` lands back inside the row.
@njit(cache=True, nogil=True, boundscheck=False)
def _im2col(x, kh, kw, stride, pad, cols):
    b, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    xf = x.ravel()
    cf = cols.ravel()
    npix = b * ho * wo
    ustride = uint64(stride)
    cf[:] = 0.0
    for ch in range(c):
        for i in range(kh):
            oy_lo = max(0, (pad - i + stride - 1) // stride)
            oy_hi = min(ho, (h - 1 + pad - i) // stride + 1)
            for j in range(kw):
                row = (ch * kh + i) * kw + j
                ox_lo = uint64(max(0, (pad - j + stride - 1) // stride))
                ox_hi = uint64(max(0, min(wo, (w - 1 + pad - j) // stride + 1)))
                for n in range(b):
                    for oy in range(oy_lo, oy_hi):
                        dst = uint64(row * npix + (n * ho + oy) * wo)
                        src = uint64(((n * c + ch) * h + oy * stride + i - pad) * w + j - pad)
                        for ox in range(ox_lo, ox_hi):
                            cf[dst + ox] = xf[src + ox * ustride]
    return cols


def im2col(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    cols = np.empty((c * kh * kw, b * ho * wo), dtype=x.dtype)
    return _im2col(np.ascontiguousarray(x), kh, kw, stride, pad, cols)


@njit(cache=True, nogil=True, boundscheck=False)
def _col2im(cols, kh, kw, stride, pad, out):
    b, c, h, w = out.shape
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    of = out.ravel()
    cf = cols.ravel()
    npix = b * ho * wo
    ustride = uint64(stride)
    for ch in range(c):
        for i in range(kh):
            oy_lo = max(0, (pad - i + stride - 1) // stride)
            oy_hi = min(ho, (h - 1 + pad - i) // stride + 1)
            for j in range(kw):
                row = (ch * kh + i) * kw + j
                ox_lo = uint64(max(0, (pad - j + stride - 1) // stride))
                ox_hi = uint64(max(0, min(wo, (w - 1 + pad - j) // stride + 1)))
                for n in range(b):
                    for oy in range(oy_lo, oy_hi):
                        src = uint64(row * npix + (n * ho + oy) * wo)
                        dst = uint64(((n * c + ch) * h + oy * stride + i - pad) * w + j - pad)
                        for ox in range(ox_lo, ox_hi):
                            of[dst + ox * ustride] += cf[src + ox]
    return out


def col2im(cols, x_shape, kh, kw, stride, pad):
    out = np.zeros(x_shape, dtype=cols.dtype)
    return _col2im(np.ascontiguousarray(cols), kh, kw, stride, pad, out)


@njit(cache=True, nogil=True)
def _upsample_backward(g, factor, out):
    b, c, h, w = out.shape
    for n in range(b):
        for ch in range(c):
            for y in range(h):
                for i in range(factor):
                    gy = y * factor + i
                    for x in range(w):
                        acc = out[n, ch, y, x]
                        for j in range(factor):
                            acc += g[n, ch, gy, x * factor + j]
                        out[n, ch, y, x] = acc
    return out


def upsample_backward(g, factor):
    b, c, fh, fw = g.shape
    out = np.zeros((b, c, fh // factor, fw // factor), dtype=g.dtype)
    return _upsample_backward(np.ascontiguousarray(g), factor, out)


@njit(cache=True, nogil=True)
def _lgamma_scalar(x):
    if x == 1.0 or x == 2.0:
        return 0.0
    if x < 0.5:
        return math.log(math.pi / abs(math.sin(math.pi * x))) - _lgamma_scalar(1.0 - x)
    x -= 1.0
    acc = _COEF[0]
    for i in range(1, 9):
        acc += _COEF[i] / (x + i)
    t = x + _LANCZOS_G + 0.5
    return _HALF_LOG_2PI + (x + 0.5) * math.log(t) - t + math.log(acc)


@njit(cache=True, nogil=True)
def _digamma_scalar(x):
    acc = 0.0
    while x < _SHIFT:
        acc -= 1.0 / x
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 * (
        1.0 / 240 - inv2 * (1.0 / 132 - inv2 * 691.0 / 32760)))))
    return acc + math.log(x) - 0.5 * inv - series


@njit(cache=True, nogil=True)
def _trigamma_scalar(x):
    acc = 0.0
    while x < _SHIFT:
        acc += 1.0 / (x * x)
        x += 1.0
    inv = 1.0 / x
    inv2 = inv * inv
    series = inv + 0.5 * inv2 + inv * inv2 * (1.0 / 6 - inv2 * (1.0 / 30 - inv2 * (
        1.0 / 42 - inv2 * (1.0 / 30 - inv2 * (5.0 / 66 - inv2 * 691.0 / 2730)))))
    return acc + series


@njit(cache=True, nogil=True)
def _map_lgamma(flat, out):
    for i in range(flat.size):
        out[i] = _lgamma_scalar(flat[i])
    return out


@njit(cache=True, nogil=True)
def _map_digamma(flat, out):
    for i in range(flat.size):
        out[i] = _digamma_scalar(flat[i])
    return out


@njit(cache=True, nogil=True)
def _map_trigamma(flat, out):
    for i in range(flat.size):
        out[i] = _trigamma_scalar(flat[i])
    return out


def _mapped(kernel, x):
    x = np.asarray(x, dtype=np.float64)
    flat = np.ascontiguousarray(x).ravel()
    return kernel(flat, np.empty_like(flat)).reshape(x.shape)


def lgamma(x):
    return _mapped(_map_lgamma, x)


def digamma(x):
    return _mapped(_map_digamma, x)


def trigamma(x):
    return _mapped(_map_trigamma, x)


# numpy's introselect partition beats a jitted sort here, and top-k runs once
# per client per round, so both backends share it
topk_mean = _numpy.topk_mean
