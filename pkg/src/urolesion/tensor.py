"""Dense tensors with reverse-mode autodiff and the primitive ops networks are built from.

Every op takes :class:`Tensor` inputs and returns a new :class:`Tensor`. When at
least one input requires a gradient the op records a node holding its inputs
and a backward rule; :func:`backward` orders those nodes into a :class:`Tape`
and replays it in reverse.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import BackwardError, NumericError, ShapeError, ValidationError

LOG_EPS = 1e-12


class _Node:
    __slots__ = ("op", "inputs", "backward_fn", "consumed")

    def __init__(self, op: str, inputs: tuple, backward_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.backward_fn = backward_fn
        self.consumed = False


class Tensor:
    """An n-d float array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "retain_grad", "name")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None
        self.retain_grad = False
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._node is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(_wrap(other, self.dtype), -1.0))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self) -> "Tensor":
        return tsum(self)

    def mean(self) -> "Tensor":
        return tmean(self)


def _wrap(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, op: str, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = _Node(op, tuple(inputs), backward_fn)
    return out


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericError(f"{what}: non-finite values encountered")


def validate_finite(x: Tensor) -> Tensor:
    """Identity op that raises :class:`NumericError` on NaN/Inf."""
    _check_finite(x.data, "validate_finite")
    return x


# ---------------------------------------------------------------------------
# tape


@dataclass
class Tape:
    """Recorded op applications in topological order (inputs before outputs)."""

    entries: list[tuple[Tensor, _Node]] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def ops(self) -> list[str]:
        return [node.op for _, node in self.entries]

    def is_topological(self) -> bool:
        position = {id(t): i for i, (t, _) in enumerate(self.entries)}
        for i, (_, node) in enumerate(self.entries):
            for inp in node.inputs:
                j = position.get(id(inp))
                if j is not None and j >= i:
                    return False
        return True


def build_tape(loss: Tensor) -> Tape:
    order: list[tuple[Tensor, _Node]] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if t._node is None:
            continue
        if expanded:
            order.append((t, t._node))
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for inp in t._node.inputs:
            if inp._node is not None and id(inp) not in seen:
                stack.append((inp, False))
    return Tape(order)


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every reachable leaf that requires a gradient.

    Leaf gradients accumulate across calls; a graph can only be replayed once.
    """
    if loss.size != 1:
        raise BackwardError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise BackwardError("loss does not depend on any tensor requiring grad")
    seed = np.ones_like(loss.data)
    if loss._node is None:
        loss.grad = seed if loss.grad is None else loss.grad + seed
        return
    if loss._node.consumed:
        raise BackwardError("graph already consumed by a previous backward(); rerun the forward pass")
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): seed}
    for out, node in reversed(tape.entries):
        if node.consumed:
            raise BackwardError("graph already consumed by a previous backward(); rerun the forward pass")
        g = grads.pop(id(out), None)
        node.consumed = True
        if g is None:
            node.backward_fn = None
            continue
        if out.retain_grad:
            out.grad = g
        in_grads = node.backward_fn(g)
        node.backward_fn = None
        for inp, gi in zip(node.inputs, in_grads):
            if gi is None or not inp.requires_grad:
                continue
            if inp._node is None:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                prev = grads.get(id(inp))
                grads[id(inp)] = gi if prev is None else prev + gi


# ---------------------------------------------------------------------------
# elementwise and reductions


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a: Tensor, b: Tensor) -> Tensor:
    try:
        out = a.data + b.data
    except ValueError as exc:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(out, "add", (a, b), bw)


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = np.asarray(b, dtype=a.dtype)
        return _make(a.data * c, "mul", (a,), lambda g: (_unbroadcast(g * c, a.shape),))
    try:
        out = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from exc

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(out, "mul", (a, b), bw)


def tsum(x: Tensor) -> Tensor:
    return _make(np.asarray(x.data.sum()), "sum", (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def tmean(x: Tensor) -> Tensor:
    n = x.size

    def bw(g):
        return (np.full(x.shape, g / n, dtype=x.dtype),)

    return _make(np.asarray(x.data.mean()), "mean", (x,), bw)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: {x.shape} -> {tuple(shape)}") from exc
    return _make(out, "reshape", (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    return reshape(x, (x.shape[0], -1))


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    xs = list(xs)
    if not xs:
        raise ShapeError("concat: no inputs")
    try:
        out = np.concatenate([x.data for x in xs], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: incompatible shapes {[x.shape for x in xs]}") from exc
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, "concat", xs, bw)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out = np.where(mask, x.data, 0).astype(x.dtype, copy=False)
    return _make(out, "relu", (x,), lambda g: (g * mask,))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis."""
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)
    _check_finite(p, "softmax")

    def bw(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, "softmax", (x,), bw)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of one-hot ``labels`` under ``probs``."""
    y = labels.data if isinstance(labels, Tensor) else np.asarray(labels)
    if y.shape != probs.shape or probs.ndim != 2:
        raise ShapeError(f"cross_entropy: probs {probs.shape} vs labels {y.shape}")
    if not (np.isin(y, (0, 1)).all() and (y.sum(axis=1) == 1).all()):
        raise ValidationError("cross_entropy: labels must be one-hot rows")
    y = y.astype(probs.dtype)
    n = probs.shape[0]
    p = probs.data
    clipped = np.clip(p, LOG_EPS, 1.0)
    loss = -(y * np.log(clipped)).sum() / n
    _check_finite(np.asarray(loss), "cross_entropy")

    def bw(g):
        inside = (p >= LOG_EPS) & (p <= 1.0)
        return (g * (-y / clipped / n) * inside,)

    return _make(np.asarray(loss, dtype=probs.dtype), "cross_entropy", (probs,), bw)


# ---------------------------------------------------------------------------
# layers


def dense(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape (in, out)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias {bias.shape} does not match {weight.shape[1]} outputs")
    out = x.data @ weight.data + bias.data

    def bw(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g if weight.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    return _make(out, "dense", (x, weight, bias), bw)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW input with a KCkk kernel."""
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    k, c2, kh, kw = kernel.shape
    if c != c2:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {c2}")
    if bias.shape != (k,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {k} filters")
    if stride < 1 or padding < 0:
        raise ShapeError(f"conv2d: invalid stride={stride} padding={padding}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w} (pad {padding})")
    _check_finite(x.data, "conv2d input")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    wmat = kernel.data.reshape(k, -1)

    if kh == kw == 1 and padding == 0:
        xs = x.data[:, :, ::stride, ::stride] if stride > 1 else x.data
        xs = np.ascontiguousarray(xs).reshape(n, c, oh * ow)
        out = np.matmul(wmat, xs) + bias.data[None, :, None]

        def bw(g):
            g3 = g.reshape(n, k, oh * ow)
            gx = gw = gb = None
            if x.requires_grad:
                gxs = np.matmul(wmat.T, g3).reshape(n, c, oh, ow)
                if stride > 1:
                    gx = np.zeros(x.shape, dtype=x.dtype)
                    gx[:, :, ::stride, ::stride] = gxs
                else:
                    gx = gxs
            if kernel.requires_grad:
                gw = np.matmul(g3, xs.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape)
            if bias.requires_grad:
                gb = g3.sum(axis=(0, 2))
            return gx, gw, gb

        return _make(out.reshape(n, k, oh, ow), "conv2d", (x, kernel, bias), bw)

    cols = kernels.im2col(x.data, kh, kw, stride, padding)
    out = (wmat @ cols).reshape(k, n, oh, ow).transpose(1, 0, 2, 3)
    out = out + bias.data[None, :, None, None]

    def bw(g):
        gmat = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(k, n * oh * ow)
        gx = gw = gb = None
        if x.requires_grad:
            gx = kernels.col2im(wmat.T @ gmat, x.shape, kh, kw, stride, padding)
        if kernel.requires_grad:
            gw = (gmat @ cols.T).reshape(kernel.shape)
        if bias.requires_grad:
            gb = gmat.sum(axis=1)
        return gx, gw, gb

    return _make(np.ascontiguousarray(out), "conv2d", (x, kernel, bias), bw)


def max_pool2d(x: Tensor, window: int, stride: int | None = None, padding: int = 0) -> Tensor:
    """Max over square windows; gradient goes to the first row-major maximum."""
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"max_pool2d: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if window < 1 or stride < 1 or padding < 0 or padding >= window:
        raise ShapeError(f"max_pool2d: invalid window={window} stride={stride} padding={padding}")
    if h + 2 * padding < window or w + 2 * padding < window:
        raise ShapeError(f"max_pool2d: window {window} larger than input {h}x{w}")
    out, arg = kernels.maxpool_forward(x.data, window, stride, padding)

    def bw(g):
        return (kernels.maxpool_backward(np.ascontiguousarray(g), arg, x.shape, window, stride, padding),)

    return _make(out, "max_pool2d", (x,), bw)


def avg_pool2d(x: Tensor, window: int, stride: int | None = None) -> Tensor:
    stride = window if stride is None else stride
    if x.ndim != 4:
        raise ShapeError(f"avg_pool2d: expected NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    if window < 1 or stride < 1 or h < window or w < window:
        raise ShapeError(f"avg_pool2d: window {window} does not fit input {h}x{w}")
    oh = (h - window) // stride + 1
    ow = (w - window) // stride + 1
    out = np.zeros((n, c, oh, ow), dtype=x.dtype)
    for i in range(window):
        for j in range(window):
            out += x.data[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride]
    out /= window * window

    def bw(g):
        gx = np.zeros(x.shape, dtype=x.dtype)
        share = g / (window * window)
        for i in range(window):
            for j in range(window):
                gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += share
        return (gx,)

    return _make(out, "avg_pool2d", (x,), bw)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean: (N, C, H, W) -> (N, C)."""
    if x.ndim != 4 or x.shape[2] * x.shape[3] == 0:
        raise ShapeError(f"global_avg_pool: expected non-empty NCHW input, got {x.shape}")
    n, c, h, w = x.shape
    out = x.data.mean(axis=(2, 3))

    def bw(g):
        return (np.broadcast_to((g / (h * w))[:, :, None, None], x.shape).copy(),)

    return _make(out, "global_avg_pool", (x,), bw)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalisation over axis 1 of a 2-d or 4-d input.

    Training mode normalises with batch statistics and updates the running
    buffers in place; eval mode uses the running buffers untouched.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm: expected 2-d or 4-d input, got {x.shape}")
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta must have shape ({c},)")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    bshape = (1, c) if x.ndim == 2 else (1, c, 1, 1)
    dt = x.dtype
    if training:
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= momentum
        running_mean += (1 - momentum) * mean
        running_var *= momentum
        running_var += (1 - momentum) * var
    else:
        mean, var = running_mean.astype(dt), running_var.astype(dt)
    invstd = (1.0 / np.sqrt(var + dt.type(eps))).astype(dt)
    xhat = (x.data - mean.reshape(bshape)) * invstd.reshape(bshape)
    out = gamma.data.reshape(bshape) * xhat + beta.data.reshape(bshape)
    _check_finite(out, "batch_norm")
    m = x.size // c

    def bw(g):
        gg = gb = gx = None
        if gamma.requires_grad:
            gg = (g * xhat).sum(axis=axes)
        if beta.requires_grad:
            gb = g.sum(axis=axes)
        if x.requires_grad:
            dxhat = g * gamma.data.reshape(bshape)
            if training:
                s1 = dxhat.sum(axis=axes).reshape(bshape)
                s2 = (dxhat * xhat).sum(axis=axes).reshape(bshape)
                gx = (invstd.reshape(bshape) / m) * (m * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * invstd.reshape(bshape)
        return gx, gg, gb

    return _make(out, "batch_norm", (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class GradCheckReport:
    analytic: np.ndarray
    numeric: np.ndarray
    rel_error: np.ndarray
    tol: float

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_error.max()) if self.rel_error.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def finite_difference_check(
    f: Callable[[Tensor], Tensor],
    point,
    eps: float = 1e-5,
    tol: float = 1e-4,
    atol: float = 1e-6,
) -> GradCheckReport:
    """Compare the autodiff gradient of scalar ``f`` at ``point`` against central differences.

    The relative error per element is ``|a - n| / max(|a|, |n|, atol)``, so
    elements whose true gradient is ~0 do not blow up the ratio.
    """
    base = np.array(point.data if isinstance(point, Tensor) else point, dtype=np.float64)
    x = Tensor(base.copy(), requires_grad=True)
    y = f(x)
    backward(y)
    analytic = np.zeros_like(base) if x.grad is None else x.grad.astype(np.float64)

    numeric = np.empty_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(Tensor(base.copy())).item()
        flat[i] = orig - eps
        fm = f(Tensor(base.copy())).item()
        flat[i] = orig
        num_flat[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), atol)
    rel = np.abs(analytic - numeric) / denom
    return GradCheckReport(analytic, numeric, rel, tol)
