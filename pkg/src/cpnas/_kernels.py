"""Compiled loops for depthwise convolution and 3x3 pooling.

Reduction order is fixed (taps in row-major order), so results are
deterministic. Out-of-image taps are skipped, which is the same as zero
padding for convolution and average pooling.
"""

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _valid_range(offset, stride, size, limit):
    """Output indices o in [lo, hi) with 0 <= o * stride + offset < size."""
    lo = 0
    if offset < 0:
        lo = (-offset + stride - 1) // stride
    hi = (size - 1 - offset) // stride + 1 if size - 1 - offset >= 0 else 0
    return lo, min(max(hi, lo), limit)


@njit(cache=True)
def dw_forward(x, w, stride, dil, pad, ho, wo):
    n, c, h, wd = x.shape
    k = w.shape[2]
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for i in range(k):
                oy0, oy1 = _valid_range(i * dil - pad, stride, h, ho)
                for j in range(k):
                    ox0, ox1 = _valid_range(j * dil - pad, stride, wd, wo)
                    wv = w[ch, 0, i, j]
                    for oy in range(oy0, oy1):
                        iy = oy * stride - pad + i * dil
                        for ox in range(ox0, ox1):
                            out[b, ch, oy, ox] += x[b, ch, iy, ox * stride - pad + j * dil] * wv
    return out


@njit(cache=True)
def dw_backward(g, x, w, stride, dil, pad):
    n, c, h, wd = x.shape
    ho, wo = g.shape[2], g.shape[3]
    k = w.shape[2]
    gx = np.zeros_like(x)
    gw = np.zeros_like(w)
    for ch in range(c):
        for i in range(k):
            oy0, oy1 = _valid_range(i * dil - pad, stride, h, ho)
            for j in range(k):
                ox0, ox1 = _valid_range(j * dil - pad, stride, wd, wo)
                wv = w[ch, 0, i, j]
                acc = x.dtype.type(0)
                for b in range(n):
                    for oy in range(oy0, oy1):
                        iy = oy * stride - pad + i * dil
                        for ox in range(ox0, ox1):
                            ix = ox * stride - pad + j * dil
                            go = g[b, ch, oy, ox]
                            gx[b, ch, iy, ix] += go * wv
                            acc += go * x[b, ch, iy, ix]
                gw[ch, 0, i, j] = acc
    return gx, gw


@njit(cache=True)
def maxpool_forward(x, stride, ho, wo):
    """3x3 max over the window; ties resolve to the lowest linear index."""
    n, c, h, wd = x.shape
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    arg = np.empty((n, c, ho, wo), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    best = -np.inf
                    best_idx = -1
                    for i in range(3):
                        iy = oy * stride - 1 + i
                        if iy < 0 or iy >= h:
                            continue
                        for j in range(3):
                            ix = ox * stride - 1 + j
                            if ix < 0 or ix >= wd:
                                continue
                            v = x[b, ch, iy, ix]
                            if best_idx < 0 or v > best:
                                best = v
                                best_idx = iy * wd + ix
                    out[b, ch, oy, ox] = best
                    arg[b, ch, oy, ox] = best_idx
    return out, arg


@njit(cache=True)
def maxpool_backward(g, arg, h, wd):
    n, c, ho, wo = g.shape
    gx = np.zeros((n, c, h, wd), dtype=g.dtype)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    idx = arg[b, ch, oy, ox]
                    gx[b, ch, idx // wd, idx % wd] += g[b, ch, oy, ox]
    return gx


@njit(cache=True)
def avgpool_forward(x, stride, ho, wo):
    """3x3 mean with padded zeros included in the divisor (always 9)."""
    n, c, h, wd = x.shape
    out = np.empty((n, c, ho, wo), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    acc = x.dtype.type(0)
                    for i in range(3):
                        iy = oy * stride - 1 + i
                        if iy < 0 or iy >= h:
                            continue
                        for j in range(3):
                            ix = ox * stride - 1 + j
                            if ix < 0 or ix >= wd:
                                continue
                            acc += x[b, ch, iy, ix]
                    out[b, ch, oy, ox] = acc / 9
    return out


@njit(cache=True)
def avgpool_backward(g, h, wd, stride):
    n, c, ho, wo = g.shape
    gx = np.zeros((n, c, h, wd), dtype=g.dtype)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    v = g[b, ch, oy, ox] / 9
                    for i in range(3):
                        iy = oy * stride - 1 + i
                        if iy < 0 or iy >= h:
                            continue
                        for j in range(3):
                            ix = ox * stride - 1 + j
                            if ix < 0 or ix >= wd:
                                continue
                            gx[b, ch, iy, ix] += v
    return gx
