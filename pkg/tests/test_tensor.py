import numpy as np
import pytest

from urolesion import tensor as T
from urolesion.errors import BackwardError, NumericError, ShapeError, ValidationError

from oracles import GRADIENT_FAMILIES, conv2d_direct


def leaf(a):
    return T.Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


@pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 3)])
def test_conv2d_forward_matches_direct_sum(stride, pad, rng):
    x = rng.standard_normal((2, 3, 9, 8))
    k = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    out = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b), stride, pad)
    np.testing.assert_allclose(out.data, conv2d_direct(x, k, b, stride, pad), rtol=1e-12, atol=1e-12)


def test_conv2d_one_by_one_fast_path(rng):
    x = rng.standard_normal((2, 5, 4, 4))
    k = rng.standard_normal((3, 5, 1, 1))
    b = rng.standard_normal(3)
    out = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(b))
    np.testing.assert_allclose(out.data, conv2d_direct(x, k, b, 1, 0), rtol=1e-12)


def test_conv2d_rejects_bad_shapes_and_nonfinite(rng):
    x = T.Tensor(rng.standard_normal((1, 3, 5, 5)))
    with pytest.raises(ShapeError):
        T.conv2d(x, T.Tensor(rng.standard_normal((2, 4, 3, 3))), T.Tensor(np.zeros(2)))
    bad = x.data.copy()
    bad[0, 0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        T.conv2d(T.Tensor(bad), T.Tensor(rng.standard_normal((2, 3, 3, 3))), T.Tensor(np.zeros(2)))


def test_dense_forward(rng):
    x, w, b = rng.standard_normal((4, 3)), rng.standard_normal((3, 2)), rng.standard_normal(2)
    np.testing.assert_allclose(T.dense(T.Tensor(x), T.Tensor(w), T.Tensor(b)).data, x @ w + b)


def test_max_pool_routes_gradient_to_first_max():
    x = leaf([[[[1.0, 3.0], [3.0, 0.0]]]])
    T.backward(T.tsum(T.max_pool2d(x, 2)))
    np.testing.assert_array_equal(x.grad, [[[[0.0, 1.0], [0.0, 0.0]]]])


def test_max_pool_padding_never_wins():
    x = leaf(-np.ones((1, 1, 3, 3)))
    out = T.max_pool2d(x, 3, 2, padding=1)
    assert out.shape == (1, 1, 2, 2)
    np.testing.assert_array_equal(out.data, -1.0)


def test_avg_and_global_pool(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    np.testing.assert_allclose(T.global_avg_pool(T.Tensor(x)).data, x.mean(axis=(2, 3)))
    np.testing.assert_allclose(T.avg_pool2d(T.Tensor(x), 2).data,
                               x.reshape(2, 3, 2, 2, 2, 2).mean(axis=(3, 5)))


def test_batch_norm_training_statistics_and_buffers(rng):
    x = rng.standard_normal((8, 3, 2, 2)) * 3 + 1
    rm, rv = np.zeros(3), np.ones(3)
    y = T.batch_norm(T.Tensor(x), T.Tensor(np.ones(3)), T.Tensor(np.zeros(3)), rm, rv, training=True)
    np.testing.assert_allclose(y.data.mean(axis=(0, 2, 3)), 0, atol=1e-12)
    np.testing.assert_allclose(y.data.var(axis=(0, 2, 3)), 1, rtol=1e-4)
    np.testing.assert_allclose(rm, 0.1 * x.mean(axis=(0, 2, 3)))
    np.testing.assert_allclose(rv, 0.9 + 0.1 * x.var(axis=(0, 2, 3)))


def test_batch_norm_eval_uses_buffers_unchanged(rng):
    x = rng.standard_normal((4, 2))
    rm, rv = np.array([0.5, -1.0]), np.array([4.0, 0.25])
    y = T.batch_norm(T.Tensor(x), T.Tensor(np.ones(2)), T.Tensor(np.zeros(2)), rm, rv, training=False)
    np.testing.assert_allclose(y.data, (x - rm) / np.sqrt(rv + 1e-5))
    np.testing.assert_array_equal(rm, [0.5, -1.0])


def test_softmax_cross_entropy_value(rng):
    z = rng.standard_normal((5, 3)) * 4
    y = np.eye(3)[[0, 2, 1, 1, 0]]
    loss = T.cross_entropy(T.softmax(T.Tensor(z)), y).item()
    lse = np.log(np.exp(z).sum(axis=1))
    assert loss == pytest.approx(np.mean(lse - (z * y).sum(axis=1)), rel=1e-12)


def test_cross_entropy_clamps_zero_probability():
    p = T.Tensor(np.array([[1.0, 0.0]]))
    assert T.cross_entropy(p, [[0, 1]]).item() == pytest.approx(-np.log(1e-12))


def test_cross_entropy_requires_one_hot():
    p = T.Tensor(np.full((2, 2), 0.5))
    with pytest.raises(ValidationError):
        T.cross_entropy(p, [[1, 1], [0, 1]])
    with pytest.raises(ShapeError):
        T.cross_entropy(p, [[1, 0, 0], [0, 1, 0]])


def test_backward_accumulates_reused_leaf():
    x = leaf([1.5, -2.0])
    T.backward(T.tsum(T.mul(x, x)))
    np.testing.assert_allclose(x.grad, [3.0, -4.0])


def test_backward_is_single_use():
    x = leaf([1.0, 2.0])
    loss = T.tsum(T.mul(x, x))
    T.backward(loss)
    with pytest.raises(BackwardError):
        T.backward(loss)


def test_backward_needs_scalar_that_requires_grad():
    with pytest.raises(BackwardError):
        T.backward(leaf([1.0, 2.0]) * 2.0)
    with pytest.raises(BackwardError):
        T.backward(T.tsum(T.Tensor(np.ones(3))))


def test_tape_is_topological(rng):
    x = leaf(rng.standard_normal((2, 3)))
    w = leaf(rng.standard_normal((3, 2)))
    h = T.relu(T.dense(x, w, T.Tensor(np.zeros(2))))
    loss = T.cross_entropy(T.softmax(T.add(h, h)), [[1, 0], [0, 1]])
    tape = T.build_tape(loss)
    assert tape.is_topological()
    assert tape.ops()[-1] == "cross_entropy"


def test_retain_grad_on_intermediate(rng):
    x = leaf(rng.standard_normal(4))
    h = T.mul(x, 3.0)
    h.retain_grad = True
    T.backward(T.tsum(T.mul(h, h)))
    np.testing.assert_allclose(h.grad, 2 * h.data)


@pytest.mark.parametrize("family", sorted(GRADIENT_FAMILIES))
def test_finite_difference_smoke(family):
    rng = np.random.default_rng(7)
    for name, f, point in GRADIENT_FAMILIES[family](rng, 6):
        report = T.finite_difference_check(f, point)
        assert report.passed, (name, report.max_rel_error)


@pytest.mark.parametrize("op", ["relu", "max_pool", "avg_pool", "gap", "concat", "reshape", "add_broadcast"])
def test_finite_difference_structural_ops(op, rng):
    x0 = rng.standard_normal((2, 3, 4, 4))
    x0[np.abs(x0) < 0.05] += 0.2  # keep relu away from its kink
    other = T.Tensor(rng.standard_normal((2, 3, 4, 4)))
    bias = T.Tensor(rng.standard_normal((1, 3, 1, 1)))
    fns = {
        "relu": lambda t: T.relu(t),
        "max_pool": lambda t: T.max_pool2d(t, 2),
        "avg_pool": lambda t: T.avg_pool2d(t, 2),
        "gap": lambda t: T.global_avg_pool(t),
        "concat": lambda t: T.concat([t, other], axis=1),
        "reshape": lambda t: T.flatten(t),
        "add_broadcast": lambda t: T.add(t, bias),
    }
    out_shape = fns[op](T.Tensor(x0)).shape
    r = T.Tensor(rng.standard_normal(out_shape))
    report = T.finite_difference_check(lambda t: T.tsum(T.mul(fns[op](t), r)), x0)
    assert report.passed, report.max_rel_error


def test_identity_conv_is_exact(rng):
    x = rng.standard_normal((2, 4, 5, 5)).astype(np.float32)
    k = np.eye(4, dtype=np.float32)[:, :, None, None]
    out = T.conv2d(T.Tensor(x), T.Tensor(k), T.Tensor(np.zeros(4, np.float32)))
    assert out.data.tobytes() == x.tobytes()


def test_gradient_is_linear(rng):
    x0 = rng.standard_normal((3, 4))
    w = T.Tensor(rng.standard_normal((4, 2)))
    r = T.Tensor(rng.standard_normal((3, 4)))

    def grad(a, b):
        x = leaf(x0)
        f = T.tsum(T.dense(x, w, T.Tensor(np.zeros(2))))
        g = T.tsum(T.mul(T.mul(x, x), r))
        T.backward(T.add(T.mul(f, a), T.mul(g, b)))
        return x.grad

    np.testing.assert_allclose(grad(2.0, -3.0), 2.0 * grad(1.0, 0.0) - 3.0 * grad(0.0, 1.0), atol=1e-10)


def test_softmax_rows(rng):
    p = T.softmax(T.Tensor(rng.standard_normal((6, 3)) * 10)).data
    np.testing.assert_allclose(p.sum(axis=1), 1, atol=1e-6)
    assert np.all((p > 0) & (p < 1))
