"""Layer primitives with hand-written backward passes.

Internally activations are channels-last ``(N, H, W, C)`` so the im2col
matmul output needs no transpose. The public single-op wrappers at the bottom
take and return channels-first ``(C, H, W)`` or ``(N, C, H, W)`` arrays.
Convolution weights are always stored as ``(C_out, C_in, kh, kw)``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError, NumericError
from . import _kernels as _k


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    """View of shape (N, H', W', C, kh, kw) over an NHWC array."""
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def _weight_matrix(weight):
    # (C_out, C_in, kh, kw) -> (kh*kw*C_in, C_out), matching the im2col column order
    cout = weight.shape[0]
    return weight.transpose(2, 3, 1, 0).reshape(-1, cout)


def conv2d_forward(x, weight, bias, stride=1):
    """Valid cross-correlation on NHWC input. Returns ``(out, cols)``."""
    n, h, w, cin = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise DimensionError(f"conv expects {wcin} input channels, got {cin}")
    if h < kh or w < kw:
        raise DimensionError(f"input {h}x{w} smaller than kernel {kh}x{kw}")
    if stride < 1:
        raise DimensionError("stride must be >= 1")
    if bias.shape != (cout,):
        raise DimensionError(f"bias shape {bias.shape} != ({cout},)")
    if kh == 1 and kw == 1 and stride == 1:
        cols = x.reshape(-1, cin)
        ho, wo = h, w
    else:
        win = _windows(x, kh, kw, stride)
        ho, wo = win.shape[1], win.shape[2]
        cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    out = cols @ _weight_matrix(weight)
    out += bias
    return out.reshape(n, ho, wo, cout), cols


def conv2d_backward(dout, x_shape, cols, weight, stride=1, need_dx=True):
    n, h, w, cin = x_shape
    cout, _, kh, kw = weight.shape
    ho, wo = dout.shape[1], dout.shape[2]
    dmat = dout.reshape(-1, cout)
    dweight = (cols.T @ dmat).reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1)
    dbias = dmat.sum(axis=0)
    if not need_dx:
        return None, dweight, dbias
    dcols = (dmat @ _weight_matrix(weight).T).reshape(n, ho, wo, kh, kw, cin)
    if kh == 1 and kw == 1 and stride == 1:
        return dcols.reshape(x_shape), dweight, dbias
    dx = np.zeros(x_shape, dtype=dout.dtype)
    span_h = stride * (ho - 1) + 1
    span_w = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dx[:, i:i + span_h:stride, j:j + span_w:stride] += dcols[:, :, :, i, j]
    return dx, dweight, dbias


def maxpool_forward(x, window, stride):
    """Max pooling on NHWC input. Returns ``(out, flat_argmax_index)``.

    Ties go to the first cell of the window in row-major order.
    """
    n, h, w, c = x.shape
    if window > h or window > w:
        raise DimensionError(f"pool window {window} larger than input {h}x{w}")
    return _k.maxpool_fwd(np.ascontiguousarray(x), window, stride)


def maxpool_backward(dout, x_shape, index):
    dx = _k.maxpool_bwd(np.ascontiguousarray(dout), index, int(np.prod(x_shape)))
    return dx.reshape(x_shape)


def prelu_forward(x, slope):
    if x.shape[-1] != slope.shape[0]:
        raise DimensionError(f"prelu slope has {slope.shape[0]} channels, input has {x.shape[-1]}")
    return _k.prelu_fwd(np.ascontiguousarray(x), slope.astype(x.dtype))


def prelu_backward(dout, x, slope):
    return _k.prelu_bwd(np.ascontiguousarray(dout, dtype=x.dtype), x, slope.astype(x.dtype))


def dense_forward(x, weight, bias):
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"dense expects width {weight.shape[1]}, got {x.shape[1]}")
    return x @ weight.T + bias


def dense_backward(dout, x, weight):
    return dout @ weight, dout.T @ x, dout.sum(axis=0)


def softmax2_forward(logits):
    """Softmax over the last axis (two classes) with max subtraction."""
    if logits.shape[-1] != 2:
        raise DimensionError(f"softmax2 expects 2 logits, got {logits.shape[-1]}")
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits")
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax2_backward(dprob, prob):
    return prob * (dprob - (dprob * prob).sum(axis=-1, keepdims=True))


def avgpool2(x):
    """2x2 mean downsample of an NCHW batch."""
    n, c, h, w = x.shape
    return x.reshape(n, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


# Public single-op API, channels-first ---------------------------------------

def _nhwc(x):
    x = np.asarray(x)
    if x.ndim == 3:
        return x.transpose(1, 2, 0)[None], True
    if x.ndim != 4:
        raise DimensionError(f"expected (C,H,W) or (N,C,H,W), got shape {x.shape}")
    return x.transpose(0, 2, 3, 1), False


def _nchw(x, single):
    x = x.transpose(0, 3, 1, 2)
    return x[0] if single else x


def conv2d(input, weights, bias, stride=1):
    x, single = _nhwc(input)
    out, _ = conv2d_forward(np.ascontiguousarray(x), np.asarray(weights), np.asarray(bias), stride)
    return _nchw(out, single)


def max_pool(input, window, stride):
    x, single = _nhwc(input)
    out, _ = maxpool_forward(np.ascontiguousarray(x), window, stride)
    return _nchw(out, single)


def prelu(input, slope):
    """Per-channel PReLU; a 3-D input is read as (C, H, W)."""
    x = np.asarray(input)
    if x.ndim == 2:
        return prelu_forward(x, np.asarray(slope))
    x, single = _nhwc(x)
    return _nchw(prelu_forward(x, np.asarray(slope)), single)


def softmax2(logits):
    return softmax2_forward(np.asarray(logits, dtype=np.float64))
