"""Pure-numpy reference kernels.

Column layout used by both backends: ``cols[(c*kh + i)*kw + j, (n*oh + y)*ow + x]``
holds ``xpad[n, c, y*stride + i, x*stride + j]``.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    win = win[:, :, :oh, :ow]
    # (n, c, oh, ow, kh, kw) -> (c, kh, kw, n, oh, ow)
    return np.ascontiguousarray(win.transpose(1, 4, 5, 0, 2, 3)).reshape(c * kh * kw, n * oh * ow)


def col2im(cols, shape, kh, kw, stride, pad):
    n, c, h, w = shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    c6 = cols.reshape(c, kh, kw, n, oh, ow)
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += c6[:, i, j].transpose(1, 0, 2, 3)
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)


def maxpool_forward(x, k, stride, pad):
    """Return (out, argmax) where argmax is the row-major index inside each window."""
    n, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)), constant_values=-np.inf)
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :oh, :ow]
    win = win.reshape(n, c, oh, ow, k * k)
    arg = win.argmax(axis=-1)  # first occurrence on ties
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), arg.astype(np.int32)


def maxpool_backward(grad, arg, shape, k, stride, pad):
    n, c, h, w = shape
    oh, ow = grad.shape[2], grad.shape[3]
    out = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=grad.dtype)
    for i in range(k):
        for j in range(k):
            hit = arg == i * k + j
            if hit.any():
                out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += np.where(hit, grad, 0)
    if pad:
        out = out[:, :, pad:pad + h, pad:pad + w]
    return np.ascontiguousarray(out)
