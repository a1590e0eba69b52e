"""Pure-numpy reference implementations of the hot kernels.

These are the fallback path selected with IDFCR_NUMBA=0 and the ground
truth the numba twins are tested against.  Layouts match the numba
kernels exactly:

  im2col:  [N,C,H,W] -> [N, C*kh*kw, OH*OW], rows ordered (c, ki, kj)
  col2im:  adjoint scatter-add of im2col
  nearest_codebook: squared-L2 argmin over codebook rows, lowest index
                    wins on exact ties
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    sn, sc, sh, sw = x.strides
    windows = as_strided(
        x,
        shape=(n, c, kh, kw, oh, ow),
        strides=(sn, sc, sh, sw, stride * sh, stride * sw),
    )
    return np.ascontiguousarray(windows).reshape(n, c * kh * kw, oh * ow)


def col2im(cols, x_shape, kh, kw, stride, pad):
    n, c, h, w = x_shape
    oh = conv_out_size(h, kh, stride, pad)
    ow = conv_out_size(w, kw, stride, pad)
    cols = cols.reshape(n, c, kh, kw, oh, ow)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for ki in range(kh):
        for kj in range(kw):
            out[:, :, ki : ki + stride * oh : stride, kj : kj + stride * ow : stride] += cols[
                :, :, ki, kj
            ]
    if pad:
        out = out[:, :, pad : pad + h, pad : pad + w]
    return np.ascontiguousarray(out)


def nearest_codebook(sites, entries):
    # direct squared differences (no ||a||^2 - 2ab expansion) so that
    # duplicated codebook rows produce bit-equal distances and ties
    # resolve to the lowest index via argmin's first-hit rule
    d2 = np.square(sites[:, None, :] - entries[None, :, :]).sum(axis=2)
    return np.argmin(d2, axis=1).astype(np.int64)
