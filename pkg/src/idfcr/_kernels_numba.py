"""Numba @njit twins of the hot kernels in ``_kernels_numpy``.

Importing this module compiles nothing; kernels JIT on first call and
cache to disk.  Kept serial: the scatter/gather loops are memory bound
and deterministic ordering keeps seeded runs bit-reproducible.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    cols = np.zeros((n, c * kh * kw, oh * ow), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    row = (ch * kh + ki) * kw + kj
                    for oi in range(oh):
                        ii = oi * stride + ki - pad
                        if ii < 0 or ii >= h:
                            continue
                        base = oi * ow
                        for oj in range(ow):
                            jj = oj * stride + kj - pad
                            if 0 <= jj < w:
                                cols[b, row, base + oj] = x[b, ch, ii, jj]
    return cols


@njit(cache=True)
def col2im(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    out = np.zeros((n, c, h, w), dtype=cols.dtype)
    for b in range(n):
        for ch in range(c):
            for ki in range(kh):
                for kj in range(kw):
                    row = (ch * kh + ki) * kw + kj
                    for oi in range(oh):
                        ii = oi * stride + ki - pad
                        if ii < 0 or ii >= h:
                            continue
                        base = oi * ow
                        for oj in range(ow):
                            jj = oj * stride + kj - pad
                            if 0 <= jj < w:
                                out[b, ch, ii, jj] += cols[b, row, base + oj]
    return out


@njit(cache=True)
def nearest_codebook(sites, entries):
    n, d = sites.shape
    b = entries.shape[0]
    idx = np.empty(n, dtype=np.int64)
    for i in range(n):
        best = -1
        best_d2 = np.inf
        for j in range(b):
            d2 = 0.0
            for k in range(d):
                diff = sites[i, k] - entries[j, k]
                d2 += diff * diff
            if d2 < best_d2:
                best_d2 = d2
                best = j
        idx[i] = best
    return idx
