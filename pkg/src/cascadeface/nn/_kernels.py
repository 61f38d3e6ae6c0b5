"""Fused loops for the memory-bound layers (PReLU, max pooling).

All kernels take channels-last arrays.
"""
import numba
import numpy as np


@numba.njit(cache=True)
def prelu_fwd(x, slope):
    c = x.shape[-1]
    xf = x.reshape(-1, c)
    out = np.empty_like(xf)
    for i in range(xf.shape[0]):
        for ch in range(c):
            v = xf[i, ch]
            out[i, ch] = v if v >= 0 else v * slope[ch]
    return out.reshape(x.shape)


@numba.njit(cache=True)
def prelu_bwd(dout, x, slope):
    c = x.shape[-1]
    xf = x.reshape(-1, c)
    df = dout.reshape(-1, c)
    dx = np.empty_like(df)
    dslope = np.zeros(c, dtype=np.float64)
    for i in range(xf.shape[0]):
        for ch in range(c):
            v = xf[i, ch]
            if v < 0:
                dx[i, ch] = df[i, ch] * slope[ch]
                dslope[ch] += v * df[i, ch]
            else:
                dx[i, ch] = df[i, ch]
    return dx.reshape(x.shape), dslope.astype(x.dtype)


@numba.njit(cache=True)
def maxpool_fwd(x, window, stride):
    n, h, w, c = x.shape
    ho = (h - window) // stride + 1
    wo = (w - window) // stride + 1
    out = np.empty((n, ho, wo, c), dtype=x.dtype)
    index = np.empty((n, ho, wo, c), dtype=np.int64)
    for b in range(n):
        for i in range(ho):
            for j in range(wo):
                for ch in range(c):
                    best = x[b, i * stride, j * stride, ch]
                    bi = i * stride
                    bj = j * stride
                    for di in range(window):
                        for dj in range(window):
                            v = x[b, i * stride + di, j * stride + dj, ch]
                            # strict comparison keeps the first maximal cell
                            if v > best:
                                best = v
                                bi = i * stride + di
                                bj = j * stride + dj
                    out[b, i, j, ch] = best
                    index[b, i, j, ch] = ((b * h + bi) * w + bj) * c + ch
    return out, index


@numba.njit(cache=True)
def maxpool_bwd(dout, index, size):
    dx = np.zeros(size, dtype=dout.dtype)
    df = dout.reshape(-1)
    idx = index.reshape(-1)
    for k in range(idx.size):
        dx[idx[k]] += df[k]
    return dx
