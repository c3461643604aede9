"""Independent reference implementations used as test oracles."""

import numpy as np


def naive_conv(x, w, stride=1, dilation=1, padding=0, groups=1):
    """Direct loop cross-correlation."""
    n, c, h, wd = x.shape
    o, cg, k, _ = w.shape
    og = o // groups
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    span = dilation * (k - 1) + 1
    ho = (h + 2 * padding - span) // stride + 1
    wo = (wd + 2 * padding - span) // stride + 1
    out = np.zeros((n, o, ho, wo), dtype=np.float64)
    for b in range(n):
        for oc in range(o):
            g = oc // og
            for y in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for ic in range(cg):
                        for i in range(k):
                            for j in range(k):
                                acc += xp[b, g * cg + ic, y * stride + i * dilation, xx * stride + j * dilation] * w[oc, ic, i, j]
                    out[b, oc, y, xx] = acc
    return out


def naive_pool(x, stride, kind):
    n, c, h, w = x.shape
    ho, wo = (h - 1) // stride + 1, (w - 1) // stride + 1
    out = np.zeros((n, c, ho, wo))
    for b in range(n):
        for ch in range(c):
            for y in range(ho):
                for xx in range(wo):
                    vals = []
                    for i in range(3):
                        for j in range(3):
                            yy, xj = y * stride - 1 + i, xx * stride - 1 + j
                            inside = 0 <= yy < h and 0 <= xj < w
                            if kind == "max":
                                if inside:
                                    vals.append(x[b, ch, yy, xj])
                            else:
                                vals.append(x[b, ch, yy, xj] if inside else 0.0)
                    out[b, ch, y, xx] = max(vals) if kind == "max" else sum(vals) / 9
    return out
