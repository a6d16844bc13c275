"""Layers, the Network graph, freeze masks and the Adam optimizer."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ArchitectureError, FreezeMaskError, ShapeError, ValidationError
from .tensor import Tensor

LAYER_KINDS = ("conv", "dense", "batchnorm", "pool", "activation", "add", "concat", "flatten")


class Layer:
    kind = ""

    def __init__(self, name: str):
        self.name = name
        self.inputs: list[str] = []
        self.params: dict[str, Tensor] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self.trainable = True
        # graph annotations used by architecture audits
        self.block: str | None = None
        self.branch: str | None = None
        self.output_shape: tuple[int, ...] | None = None

    @property
    def parameterized(self) -> bool:
        return bool(self.params)

    def build(self, input_shapes: list[tuple[int, ...]], rng: np.random.Generator, dtype) -> tuple[int, ...]:
        raise NotImplementedError

    def forward(self, xs: list[Tensor], params: Mapping[str, Tensor], training: bool) -> Tensor:
        raise NotImplementedError

    def config(self) -> dict:
        return {}

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"


def _he_uniform(rng, shape, fan_in, dtype):
    limit = np.sqrt(6.0 / fan_in)
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


class Conv2D(Layer):
    kind = "conv"

    def __init__(self, name, filters: int, kernel_size: int, stride: int = 1, padding: int | str = "same"):
        super().__init__(name)
        self.filters = int(filters)
        self.kernel_size = int(kernel_size)
        self.stride = int(stride)
        self.padding = (self.kernel_size - 1) // 2 if padding == "same" else int(padding)

    def build(self, input_shapes, rng, dtype):
        (c, h, w), = input_shapes
        k = self.kernel_size
        if h + 2 * self.padding < k or w + 2 * self.padding < k:
            raise ShapeError(f"{self.name}: {k}x{k} kernel does not fit a {h}x{w} input")
        self.params = {
            "kernel": Tensor(_he_uniform(rng, (self.filters, c, k, k), c * k * k, dtype)),
            "bias": Tensor(np.zeros(self.filters, dtype=dtype)),
        }
        oh = (h + 2 * self.padding - k) // self.stride + 1
        ow = (w + 2 * self.padding - k) // self.stride + 1
        return (self.filters, oh, ow)

    def forward(self, xs, params, training):
        return T.conv2d(xs[0], params["kernel"], params["bias"], self.stride, self.padding)

    def config(self):
        return {"filters": self.filters, "kernel_size": self.kernel_size, "stride": self.stride,
                "padding": self.padding}


class Dense(Layer):
    kind = "dense"

    def __init__(self, name, units: int):
        super().__init__(name)
        self.units = int(units)

    def build(self, input_shapes, rng, dtype):
        shape, = input_shapes
        if len(shape) != 1:
            raise ShapeError(f"{self.name}: dense layer needs a flat input, got {shape}")
        f = shape[0]
        self.params = {
            "weight": Tensor(_he_uniform(rng, (f, self.units), f, dtype)),
            "bias": Tensor(np.zeros(self.units, dtype=dtype)),
        }
        return (self.units,)

    def forward(self, xs, params, training):
        return T.dense(xs[0], params["weight"], params["bias"])

    def config(self):
        return {"units": self.units}


class BatchNorm(Layer):
    kind = "batchnorm"

    def __init__(self, name, momentum: float = 0.9, eps: float = 1e-5):
        super().__init__(name)
        self.momentum = momentum
        self.eps = eps

    def build(self, input_shapes, rng, dtype):
        shape, = input_shapes
        c = shape[0]
        self.params = {
            "gamma": Tensor(np.ones(c, dtype=dtype)),
            "beta": Tensor(np.zeros(c, dtype=dtype)),
        }
        self.buffers = {
            "running_mean": np.zeros(c, dtype=dtype),
            "running_var": np.ones(c, dtype=dtype),
        }
        return tuple(shape)

    def forward(self, xs, params, training):
        # frozen batch-norm layers always run on their running statistics
        return T.batch_norm(xs[0], params["gamma"], params["beta"], self.buffers["running_mean"],
                            self.buffers["running_var"], training and self.trainable,
                            self.momentum, self.eps)

    def config(self):
        return {"momentum": self.momentum, "eps": self.eps}


class MaxPool(Layer):
    kind = "pool"
    mode = "max"

    def __init__(self, name, window: int, stride: int | None = None, padding: int = 0):
        super().__init__(name)
        self.window = window
        self.stride = window if stride is None else stride
        self.padding = padding

    def build(self, input_shapes, rng, dtype):
        (c, h, w), = input_shapes
        if h + 2 * self.padding < self.window or w + 2 * self.padding < self.window:
            raise ShapeError(f"{self.name}: pool window {self.window} larger than {h}x{w}")
        oh = (h + 2 * self.padding - self.window) // self.stride + 1
        ow = (w + 2 * self.padding - self.window) // self.stride + 1
        return (c, oh, ow)

    def forward(self, xs, params, training):
        return T.max_pool2d(xs[0], self.window, self.stride, self.padding)

    def config(self):
        return {"window": self.window, "stride": self.stride, "padding": self.padding}


class AvgPool(MaxPool):
    mode = "avg"

    def __init__(self, name, window: int, stride: int | None = None):
        super().__init__(name, window, stride, 0)

    def forward(self, xs, params, training):
        return T.avg_pool2d(xs[0], self.window, self.stride)


class GlobalAvgPool(Layer):
    kind = "pool"
    mode = "global_avg"

    def build(self, input_shapes, rng, dtype):
        (c, h, w), = input_shapes
        return (c,)

    def forward(self, xs, params, training):
        return T.global_avg_pool(xs[0])


class Activation(Layer):
    kind = "activation"

    def __init__(self, name, fn: str):
        super().__init__(name)
        if fn not in ("relu", "softmax"):
            raise ValueError(f"unknown activation {fn!r}")
        self.fn = fn

    def build(self, input_shapes, rng, dtype):
        return tuple(input_shapes[0])

    def forward(self, xs, params, training):
        return T.relu(xs[0]) if self.fn == "relu" else T.softmax(xs[0])

    def config(self):
        return {"fn": self.fn}


class Add(Layer):
    kind = "add"

    def build(self, input_shapes, rng, dtype):
        if len(input_shapes) < 2 or any(s != input_shapes[0] for s in input_shapes):
            raise ShapeError(f"{self.name}: add needs >= 2 equal shapes, got {input_shapes}")
        return tuple(input_shapes[0])

    def forward(self, xs, params, training):
        out = xs[0]
        for x in xs[1:]:
            out = T.add(out, x)
        return out


class Concat(Layer):
    kind = "concat"

    def build(self, input_shapes, rng, dtype):
        spatial = {tuple(s[1:]) for s in input_shapes}
        if len(spatial) != 1:
            raise ShapeError(f"{self.name}: concat branches disagree spatially: {input_shapes}")
        return (sum(s[0] for s in input_shapes),) + tuple(input_shapes[0][1:])

    def forward(self, xs, params, training):
        return T.concat(xs, axis=1)


class Flatten(Layer):
    kind = "flatten"

    def build(self, input_shapes, rng, dtype):
        return (int(np.prod(input_shapes[0])),)

    def forward(self, xs, params, training):
        return T.flatten(xs[0])


class Network:
    """A DAG of named layers kept in insertion (= topological) order.

    ``"input"`` names the network input. A layer with no explicit inputs reads
    the previously added layer.
    """

    def __init__(self, input_shape: Sequence[int], name: str = "network"):
        self.name = name
        self.input_shape = tuple(int(v) for v in input_shape)
        self.layers: dict[str, Layer] = {}
        self.output = "input"
        self.logits = None  # name of the pre-softmax layer, if any
        self.spec = None
        self.provenance: list[dict] = []
        self.dtype = np.dtype(np.float32)
        self._shapes: dict[str, tuple[int, ...]] = {"input": self.input_shape}

    def add(self, layer: Layer, inputs: str | Sequence[str] | None = None, *, block: str | None = None,
            branch: str | None = None) -> str:
        if layer.name in self.layers or layer.name == "input":
            raise ArchitectureError(f"duplicate layer name {layer.name!r}")
        if inputs is None:
            inputs = [self.output]
        elif isinstance(inputs, str):
            inputs = [inputs]
        for src in inputs:
            if src != "input" and src not in self.layers:
                raise ArchitectureError(f"{layer.name}: unknown input {src!r}")
        layer.inputs = list(inputs)
        layer.block, layer.branch = block, branch
        self.layers[layer.name] = layer
        self.output = layer.name
        return layer.name

    def build(self, seed: int | np.random.Generator = 0, dtype=np.float32) -> "Network":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        self.dtype = np.dtype(dtype)
        shapes = {"input": self.input_shape}
        for layer in self.layers.values():
            layer.output_shape = tuple(layer.build([shapes[s] for s in layer.inputs], rng, self.dtype))
            shapes[layer.name] = layer.output_shape
        self._shapes = shapes
        self.set_trainable({layer.name: True for layer in self.parameterized_layers()})
        return self

    # -- inspection

    def __getitem__(self, name: str) -> Layer:
        return self.layers[name]

    def __iter__(self):
        return iter(self.layers.values())

    def of_kind(self, kind: str) -> list[Layer]:
        return [layer for layer in self.layers.values() if layer.kind == kind]

    def parameterized_layers(self) -> list[Layer]:
        return [layer for layer in self.layers.values() if layer.parameterized]

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"{layer.name}/{k}": p for layer in self.parameterized_layers() for k, p in layer.params.items()}

    def state_dict(self) -> dict[str, np.ndarray]:
        """Parameters and buffers by ``layer/name`` (live arrays, not copies)."""
        state = {}
        for layer in self.layers.values():
            for k, p in layer.params.items():
                state[f"{layer.name}/{k}"] = p.data
            for k, b in layer.buffers.items():
                state[f"{layer.name}/{k}"] = b
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        own = self.state_dict()
        if set(own) != set(state):
            missing = sorted(set(own) - set(state))
            extra = sorted(set(state) - set(own))
            raise ShapeError(f"state mismatch: missing={missing[:5]} unexpected={extra[:5]}")
        for key, arr in state.items():
            if own[key].shape != arr.shape:
                raise ShapeError(f"{key}: expected shape {own[key].shape}, got {arr.shape}")
        for layer in self.layers.values():
            for k, p in layer.params.items():
                p.data = np.array(state[f"{layer.name}/{k}"], dtype=p.data.dtype, copy=True)
            for k in layer.buffers:
                layer.buffers[k] = np.array(state[f"{layer.name}/{k}"], dtype=layer.buffers[k].dtype, copy=True)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.named_parameters().values())

    def state_hash(self) -> str:
        h = hashlib.sha256()
        for key, arr in sorted(self.state_dict().items()):
            h.update(key.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def shape_of(self, name: str) -> tuple[int, ...]:
        return self._shapes[name]

    # -- freezing

    def set_trainable(self, flags: Mapping[str, bool]) -> None:
        for layer in self.parameterized_layers():
            layer.trainable = bool(flags[layer.name])
            for p in layer.params.values():
                p.requires_grad = layer.trainable
                p.grad = None

    def live_layers(self) -> set[str]:
        """Layers whose output depends on a trainable parameter."""
        live: set[str] = set()
        for layer in self.layers.values():
            if (layer.parameterized and layer.trainable) or any(s in live for s in layer.inputs):
                live.add(layer.name)
        return live

    def frontier(self) -> list[str]:
        """Constant (non-live) activations that live layers read."""
        live = self.live_layers()
        seen: dict[str, None] = {}
        for name in live:
            for src in self.layers[name].inputs:
                if src not in live:
                    seen[src] = None
        return sorted(seen, key=lambda n: -1 if n == "input" else list(self.layers).index(n))

    # -- execution

    def forward(
        self,
        x,
        training: bool = False,
        *,
        capture: Iterable[str] = (),
        leaf: str | None = None,
        detach_params: bool = False,
        precomputed: Mapping[str, np.ndarray] | None = None,
    ):
        """Run the graph.

        ``capture`` names activations to return alongside the output.
        ``leaf`` turns one activation into a gradient-tracking leaf so its
        gradient can be read after :func:`backward`. ``precomputed`` supplies
        activations by name; only the layers downstream of it are evaluated.
        Returns the output tensor, or ``(output, captured)`` when capturing.
        """
        capture = list(capture)
        acts: dict[str, Tensor] = {}
        if precomputed is not None:
            for name, arr in precomputed.items():
                acts[name] = Tensor(arr)
            todo = self._downstream(set(precomputed))
        else:
            xt = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
            if xt.shape[1:] != self.input_shape:
                raise ShapeError(f"{self.name}: expected input (N, {self.input_shape}), got {xt.shape}")
            acts["input"] = xt
            todo = list(self.layers)
        for name in todo:
            layer = self.layers[name]
            params = layer.params
            if detach_params:
                params = {k: Tensor(p.data) for k, p in params.items()}
            out = layer.forward([acts[s] for s in layer.inputs], params, training)
            if name == leaf:
                out = Tensor(out.data, requires_grad=True)
                out.retain_grad = True
            acts[name] = out
        if capture:
            return acts[self.output], {k: acts[k] for k in capture}
        return acts[self.output]

    def _downstream(self, given: set[str]) -> list[str]:
        needed: list[str] = []
        avail = set(given)
        for name, layer in self.layers.items():
            if name in avail:
                continue
            if all(s in avail for s in layer.inputs):
                needed.append(name)
                avail.add(name)
        if self.output not in avail:
            raise ArchitectureError("precomputed activations do not determine the output")
        return needed


# ---------------------------------------------------------------------------
# freezing


@dataclass(frozen=True)
class FreezeMask:
    """Trainable flag per parameterized layer, in topological order."""

    flags: tuple[tuple[str, bool], ...]

    def as_dict(self) -> dict[str, bool]:
        return dict(self.flags)

    def trainable_layers(self) -> list[str]:
        return [name for name, on in self.flags if on]

    def frozen_layers(self) -> list[str]:
        return [name for name, on in self.flags if not on]

    def check_bound(self, network: Network) -> None:
        names = [layer.name for layer in network.parameterized_layers()]
        if names != [name for name, _ in self.flags]:
            raise FreezeMaskError("freeze mask is not bound to this network's parameterized layers")


def make_freeze_mask(network: Network, policy: str = "all_but_last_k", k: int = 4) -> FreezeMask:
    if policy != "all_but_last_k":
        raise FreezeMaskError(f"unknown freeze policy {policy!r}")
    names = [layer.name for layer in network.parameterized_layers()]
    if not 0 <= k <= len(names):
        raise FreezeMaskError(f"k={k} outside 0..{len(names)} parameterized layers")
    cut = len(names) - k
    return FreezeMask(tuple((name, i >= cut) for i, name in enumerate(names)))


def apply_freeze(network: Network, policy: str = "all_but_last_k", k: int = 4) -> FreezeMask:
    """Leave only the last ``k`` parameterized layers trainable and bind the mask."""
    mask = make_freeze_mask(network, policy, k)
    network.set_trainable(mask.as_dict())
    return mask


def unfreeze_all(network: Network) -> FreezeMask:
    return apply_freeze(network, k=len(network.parameterized_layers()))


def trainable_parameter_count(network: Network, mask: FreezeMask) -> int:
    mask.check_bound(network)
    on = mask.as_dict()
    return sum(p.size for layer in network.parameterized_layers() if on[layer.name]
               for p in layer.params.values())


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], state: AdamState) -> AdamState:
    """One bias-corrected Adam update, in place. Frozen tensors are not touched."""
    active = {k: p for k, p in params.items() if p.requires_grad}
    for k, p in active.items():
        if p.grad is None:
            raise ValidationError(f"adam_step: trainable parameter {k!r} has no gradient")
        if p.grad.shape != p.shape:
            raise ValidationError(f"adam_step: gradient shape {p.grad.shape} != {p.shape} for {k!r}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for k, p in active.items():
        g = p.grad
        dt = p.data.dtype
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p.data)
            state.v[k] = np.zeros_like(p.data)
        v = state.v[k]
        m *= dt.type(b1)
        m += dt.type(1 - b1) * g
        v *= dt.type(b2)
        v += dt.type(1 - b2) * (g * g)
        m_hat = m / dt.type(c1)
        v_hat = v / dt.type(c2)
        p.data = p.data - dt.type(state.lr) * m_hat / (np.sqrt(v_hat) + dt.type(state.eps))
    return state


def zero_grad(params: Mapping[str, Tensor]) -> None:
    for p in params.values():
        p.grad = None
