"""Dense layer primitives with hand-written forward/backward passes.

Everything is float64, batch-first NCHW, and deterministic. There is no
autodiff graph: the network is a fixed feed-forward stack and each layer
pairs a ``*_forward`` (returning output and a cache) with a
``*_backward`` (consuming the upstream gradient and the cache).

Convolutions are computed as cross-correlations via an im2col matrix so
that forward pass, weight gradient and input gradient are all GEMMs. The
batch is processed in chunks sized to keep the im2col buffer near the
cache budget; a monolithic buffer for a 32-image 64x64 batch is ~150 MB
and measurably slower than re-materializing small chunks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from numpy.typing import NDArray
from scipy.special import expit

__all__ = [
    "as_tensor",
    "ConvParams",
    "conv2d_forward",
    "conv2d_backward",
    "relu_forward",
    "relu_backward",
    "maxpool2x2_forward",
    "maxpool2x2_backward",
    "sigmoid_forward",
    "sigmoid_backward",
    "fixed_linear_forward",
    "fixed_linear_backward",
]


def as_tensor(values, checked: bool = False) -> NDArray[np.float64]:
    """Coerce to a float64 array; in checked mode reject NaN/Inf."""
    arr = np.asarray(values, dtype=np.float64)
    if checked and not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains non-finite values")
    return arr


@dataclass
class ConvParams:
    """Kernel (out_ch, in_ch, kh, kw) and per-output-channel bias."""

    kernel: NDArray[np.float64]
    bias: NDArray[np.float64]

    def __post_init__(self) -> None:
        if self.kernel.ndim != 4:
            raise ValueError("kernel must be 4-dimensional")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ValueError("bias length must equal the output channel count")


# Target size in bytes for one chunk's im2col buffer. The value is a pure
# function of layer shapes, so chunking never affects determinism, only
# summation batching (which is itself a fixed order).
_COLS_BUDGET = 10_000_000


def _chunk_rows(out_h: int, out_w: int, row_len: int) -> int:
    return max(1, _COLS_BUDGET // (out_h * out_w * row_len * 8))


def _windows(x_padded: NDArray[np.float64], kh: int, kw: int, stride: int):
    win = sliding_window_view(x_padded, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x: NDArray[np.float64], params: ConvParams, stride: int = 1,
                   padding: int = 0):
    """Cross-correlate a (N, C, H, W) batch with the kernel.

    Returns (out, cache); out has shape (N, out_ch, out_h, out_w) with
    out_h = (H + 2*padding - kh) // stride + 1.
    """
    n, c, h, w = x.shape
    out_ch, in_ch, kh, kw = params.kernel.shape
    if c != in_ch:
        raise ValueError(f"input has {c} channels, kernel expects {in_ch}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ValueError("padded input smaller than kernel")
    out_h = (h + 2 * padding - kh) // stride + 1
    out_w = (w + 2 * padding - kw) // stride + 1
    if padding:
        xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x
    win = _windows(xp, kh, kw, stride)
    w_mat = params.kernel.reshape(out_ch, -1)
    out = np.empty((n, out_ch, out_h, out_w))
    for s in range(0, n, _chunk_rows(out_h, out_w, in_ch * kh * kw)):
        sl = win[s:s + _chunk_rows(out_h, out_w, in_ch * kh * kw)]
        cols = sl.transpose(0, 2, 3, 1, 4, 5).reshape(sl.shape[0] * out_h * out_w, -1)
        res = cols @ w_mat.T + params.bias
        out[s:s + sl.shape[0]] = (res.reshape(sl.shape[0], out_h, out_w, out_ch)
                                  .transpose(0, 3, 1, 2))
    cache = (x.shape, params, stride, padding, xp)
    return out, cache


def conv2d_backward(dout: NDArray[np.float64], cache):
    """Gradients of conv2d_forward w.r.t. input, kernel and bias."""
    (n, c, h, w), params, stride, padding, xp = cache
    out_ch, _, kh, kw = params.kernel.shape
    _, _, out_h, out_w = dout.shape
    win = _windows(xp, kh, kw, stride)
    w_mat = params.kernel.reshape(out_ch, -1)
    # Rows ordered (kh, kw, c) so each kernel-offset slice of dcols is
    # contiguous over channels for the scatter-add below.
    w_cl = params.kernel.transpose(2, 3, 1, 0).reshape(-1, out_ch)

    dbias = dout.sum(axis=(0, 2, 3))
    dk_mat = np.zeros_like(w_mat)
    # Channels-last padded input gradient: the kh*kw scatter-adds then run
    # with a contiguous innermost axis.
    dxp_cl = np.zeros((n, xp.shape[2], xp.shape[3], c))
    chunk = _chunk_rows(out_h, out_w, c * kh * kw)
    for s in range(0, n, chunk):
        sl = win[s:s + chunk]
        m = sl.shape[0]
        cols = sl.transpose(0, 2, 3, 1, 4, 5).reshape(m * out_h * out_w, -1)
        g_mat = dout[s:s + m].transpose(0, 2, 3, 1).reshape(m * out_h * out_w, out_ch)
        dk_mat += g_mat.T @ cols
        dcols = (g_mat @ w_cl.T).reshape(m, out_h, out_w, kh, kw, c)
        for i in range(kh):
            for j in range(kw):
                ys = slice(i, i + (out_h - 1) * stride + 1, stride)
                xs = slice(j, j + (out_w - 1) * stride + 1, stride)
                dxp_cl[s:s + m, ys, xs, :] += dcols[:, :, :, i, j, :]
    if padding:
        dxp_cl = dxp_cl[:, padding:-padding, padding:-padding, :]
    dx = np.ascontiguousarray(dxp_cl.transpose(0, 3, 1, 2))
    return dx, dk_mat.reshape(params.kernel.shape), dbias


def relu_forward(x: NDArray[np.float64]):
    return np.maximum(x, 0.0), x


def relu_backward(dout: NDArray[np.float64], cache):
    return dout * (cache > 0)


def maxpool2x2_forward(x: NDArray[np.float64]):
    """2x2 stride-2 max pooling; spatial dims must be even.

    Within each window the argmax is recorded for backward routing; ties
    go to the first position in row-major window order.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"maxpool2x2 requires even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., np.newaxis], axis=-1)[..., 0]
    return out, (x.shape, idx)


def maxpool2x2_backward(dout: NDArray[np.float64], cache):
    (n, c, h, w), idx = cache
    dwin = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(dwin, idx[..., np.newaxis], dout[..., np.newaxis], axis=-1)
    dwin = dwin.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(dwin.reshape(n, c, h, w))


def sigmoid_forward(x: NDArray[np.float64]):
    s = expit(x)
    return s, s


def sigmoid_backward(dout: NDArray[np.float64], cache):
    s = cache
    return dout * s * (1.0 - s)


def fixed_linear_forward(x: NDArray[np.float64],
                         weight: NDArray[np.float64]) -> NDArray[np.float64]:
    """Apply a constant linear map: ``weight @ x``.

    The weight matrix is a fixed model component (it is fit once from
    label statistics, never updated by training), so there is no weight
    gradient; only the input gradient exists. Accepts a single vector or
    a (batch, dim) matrix.
    """
    if x.ndim == 1:
        if x.shape[0] != weight.shape[1]:
            raise ValueError(f"expected input of length {weight.shape[1]}, got {x.shape[0]}")
        return weight @ x
    if x.ndim == 2:
        if x.shape[1] != weight.shape[1]:
            raise ValueError(f"expected inputs of length {weight.shape[1]}, got {x.shape[1]}")
        return x @ weight.T
    raise ValueError("fixed_linear_forward expects a vector or a batch of vectors")


def fixed_linear_backward(dout: NDArray[np.float64],
                          weight: NDArray[np.float64]) -> NDArray[np.float64]:
    """Input gradient of the fixed linear map: the adjoint ``weight.T @ g``."""
    if dout.ndim == 1:
        return weight.T @ dout
    if dout.ndim == 2:
        return dout @ weight
    raise ValueError("fixed_linear_backward expects a vector or a batch of vectors")
