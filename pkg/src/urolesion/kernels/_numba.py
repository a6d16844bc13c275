"""numba versions of the numpy kernels; same layouts, same summation order."""
import numpy as np
from numba import njit


@njit(cache=True)
def _valid(j, stride, pad, w, ow):
    # output columns xo whose source column xo*stride + j - pad lies inside [0, w)
    lo = max(0, (pad - j + stride - 1) // stride)
    hi = min(ow, (w - 1 + pad - j) // stride + 1)
    return lo, max(lo, hi)


@njit(cache=True)
def _im2col(x, kh, kw, stride, pad, oh, ow):
    n_, c_, h, w = x.shape
    cols = np.zeros((c_ * kh * kw, n_ * oh * ow), dtype=x.dtype)
    for c in range(c_):
        for i in range(kh):
            for j in range(kw):
                row = (c * kh + i) * kw + j
                lo, hi = _valid(j, stride, pad, w, ow)
                for n in range(n_):
                    base = n * oh * ow
                    for y in range(oh):
                        yy = y * stride + i - pad
                        if yy < 0 or yy >= h:
                            continue
                        off = base + y * ow
                        for xo in range(lo, hi):
                            cols[row, off + xo] = x[n, c, yy, xo * stride + j - pad]
    return cols


@njit(cache=True)
def _col2im(cols, n_, c_, h, w, kh, kw, stride, pad, oh, ow):
    out = np.zeros((n_, c_, h, w), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            for c in range(c_):
                row = (c * kh + i) * kw + j
                lo, hi = _valid(j, stride, pad, w, ow)
                for n in range(n_):
                    base = n * oh * ow
                    for y in range(oh):
                        yy = y * stride + i - pad
                        if yy < 0 or yy >= h:
                            continue
                        off = base + y * ow
                        for xo in range(lo, hi):
                            out[n, c, yy, xo * stride + j - pad] += cols[row, off + xo]
    return out


@njit(cache=True)
def _maxpool_forward(x, k, stride, pad, oh, ow):
    n_, c_, h, w = x.shape
    out = np.empty((n_, c_, oh, ow), dtype=x.dtype)
    arg = np.empty((n_, c_, oh, ow), dtype=np.int32)
    for n in range(n_):
        for c in range(c_):
            for y in range(oh):
                for xo in range(ow):
                    best = -np.inf
                    besti = 0
                    found = False
                    for i in range(k):
                        yy = y * stride + i - pad
                        for j in range(k):
                            xx = xo * stride + j - pad
                            if 0 <= yy < h and 0 <= xx < w:
                                v = x[n, c, yy, xx]
                                if not found or v > best:
                                    best = v
                                    besti = i * k + j
                                    found = True
                    out[n, c, y, xo] = best
                    arg[n, c, y, xo] = besti
    return out, arg


@njit(cache=True)
def _maxpool_backward(grad, arg, n_, c_, h, w, k, stride, pad):
    out = np.zeros((n_, c_, h, w), dtype=grad.dtype)
    oh, ow = grad.shape[2], grad.shape[3]
    # window-offset-major order so accumulation order matches the numpy kernel
    for i in range(k):
        for j in range(k):
            idx = i * k + j
            for n in range(n_):
                for c in range(c_):
                    for y in range(oh):
                        yy = y * stride + i - pad
                        for xo in range(ow):
                            if arg[n, c, y, xo] == idx:
                                xx = xo * stride + j - pad
                                out[n, c, yy, xx] += grad[n, c, y, xo]
    return out


def im2col(x, kh, kw, stride, pad):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    return _im2col(np.ascontiguousarray(x), kh, kw, stride, pad, oh, ow)


def col2im(cols, shape, kh, kw, stride, pad):
    n, c, h, w = shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    return _col2im(np.ascontiguousarray(cols), n, c, h, w, kh, kw, stride, pad, oh, ow)


def maxpool_forward(x, k, stride, pad):
    n, c, h, w = x.shape
    oh = (h + 2 * pad - k) // stride + 1
    ow = (w + 2 * pad - k) // stride + 1
    return _maxpool_forward(np.ascontiguousarray(x), k, stride, pad, oh, ow)


def maxpool_backward(grad, arg, shape, k, stride, pad):
    n, c, h, w = shape
    return _maxpool_backward(np.ascontiguousarray(grad), arg, n, c, h, w, k, stride, pad)
