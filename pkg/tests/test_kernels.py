import os
import subprocess
import sys

import numpy as np
import pytest

from urolesion.kernels import numba_kernels, numpy_kernels

needs_numba = pytest.mark.skipif(numba_kernels is None, reason="numba unavailable")

SHAPES = [
    ((2, 3, 9, 11), 3, 1, 1),
    ((2, 3, 9, 11), 7, 2, 3),
    ((1, 2, 5, 5), 3, 2, 0),
    ((2, 2, 6, 7), 5, 3, 2),
    ((1, 1, 4, 4), 1, 1, 0),
    ((1, 1, 3, 3), 5, 1, 2),
]


def direct_im2col(x, k, s, p):
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    oh, ow = (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1
    cols = np.zeros((c * k * k, n * oh * ow), x.dtype)
    for ci in range(c):
        for i in range(k):
            for j in range(k):
                for ni in range(n):
                    for y in range(oh):
                        for xo in range(ow):
                            cols[(ci * k + i) * k + j, (ni * oh + y) * ow + xo] = xp[ni, ci, y * s + i, xo * s + j]
    return cols


@pytest.mark.parametrize("shape,k,s,p", SHAPES)
def test_im2col_matches_loop_definition(shape, k, s, p, rng):
    x = rng.standard_normal(shape).astype(np.float32)
    np.testing.assert_array_equal(numpy_kernels.im2col(x, k, k, s, p), direct_im2col(x, k, s, p))


@pytest.mark.parametrize("shape,k,s,p", SHAPES)
def test_col2im_is_adjoint_of_im2col(shape, k, s, p, rng):
    x = rng.standard_normal(shape)
    cols = numpy_kernels.im2col(x, k, k, s, p)
    r = rng.standard_normal(cols.shape)
    # <im2col(x), r> == <x, col2im(r)>
    assert np.isclose((cols * r).sum(), (x * numpy_kernels.col2im(r, shape, k, k, s, p)).sum(), rtol=1e-12)


@needs_numba
@pytest.mark.parametrize("shape,k,s,p", SHAPES)
def test_backends_bitwise_equal_conv(shape, k, s, p, rng):
    x = rng.standard_normal(shape).astype(np.float32)
    a, b = numpy_kernels.im2col(x, k, k, s, p), numba_kernels.im2col(x, k, k, s, p)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(numpy_kernels.col2im(a, shape, k, k, s, p),
                                  numba_kernels.col2im(a, shape, k, k, s, p))


@needs_numba
@pytest.mark.parametrize("shape,k,s,p", [((2, 3, 8, 8), 2, 2, 0), ((2, 3, 9, 7), 3, 2, 1), ((1, 2, 5, 5), 3, 1, 1)])
def test_backends_bitwise_equal_pool(shape, k, s, p, rng):
    x = rng.integers(0, 4, size=shape).astype(np.float32)  # plenty of ties
    oa, aa = numpy_kernels.maxpool_forward(x, k, s, p)
    ob, ab = numba_kernels.maxpool_forward(x, k, s, p)
    np.testing.assert_array_equal(oa, ob)
    np.testing.assert_array_equal(aa, ab)
    g = rng.standard_normal(oa.shape).astype(np.float32)
    np.testing.assert_array_equal(numpy_kernels.maxpool_backward(g, aa, shape, k, s, p),
                                  numba_kernels.maxpool_backward(g, ab, shape, k, s, p))


@pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("0", "numba" if numba_kernels else "numpy")])
def test_env_flag_selects_backend(flag, expected):
    env = dict(os.environ, UROLESION_DISABLE_NUMBA=flag)
    out = subprocess.run([sys.executable, "-c", "from urolesion.kernels import BACKEND; print(BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == expected
