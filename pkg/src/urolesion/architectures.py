"""VGG-16, Inception V3 and ResNet50 backbones with the 2048/1024/2 classification head.

``width_scale`` shrinks every channel count (never below 8) so the graphs can
be trained on a laptop CPU at 64x64; at scale 1.0 the layouts match the
published definitions.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ArchitectureError, ShapeError
from .nn import (Activation, Add, BatchNorm, Concat, Conv2D, Dense, Flatten, GlobalAvgPool, MaxPool,
                 Network)

BACKBONES = ("vgg16", "inception_v3", "resnet50")
HEAD_SIZES = (2048, 1024, 2)
VGG16_PLAN = ((64, 64), (128, 128), (256, 256, 256), (512, 512, 512), (512, 512, 512))
RESNET50_STAGES = ((64, 3, 1), (128, 4, 2), (256, 6, 2), (512, 3, 2))


@dataclass(frozen=True)
class NetworkSpec:
    backbone: str
    input_resolution: tuple[int, int] = (224, 224)
    width_scale: float = 1.0
    inception_variant: str = "classic"
    dtype: str = "float32"

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ArchitectureError(f"unknown backbone {self.backbone!r}; choose from {BACKBONES}")
        if not 0 < self.width_scale <= 1:
            raise ArchitectureError(f"width_scale must lie in (0, 1], got {self.width_scale}")
        if self.inception_variant not in ("classic", "factorized"):
            raise ArchitectureError(f"unknown inception variant {self.inception_variant!r}")
        if self.dtype not in ("float32", "float64"):
            raise ArchitectureError(f"unsupported dtype {self.dtype!r}")
        h, w = self.input_resolution
        object.__setattr__(self, "input_resolution", (int(h), int(w)))
        object.__setattr__(self, "width_scale", float(self.width_scale))

    @property
    def head_sizes(self) -> tuple[int, int, int]:
        return (scaled(HEAD_SIZES[0], self.width_scale), scaled(HEAD_SIZES[1], self.width_scale), 2)

    def channels(self, c: int) -> int:
        return scaled(c, self.width_scale)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_resolution"] = list(self.input_resolution)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        d["input_resolution"] = tuple(d["input_resolution"])
        return cls(**d)


def scaled(c: int, scale: float) -> int:
    return max(8, int(round(c * scale)))


# ---------------------------------------------------------------------------
# head


def attach_head(net: Network, features: str, sizes: tuple[int, int, int] = HEAD_SIZES) -> list[str]:
    """Append dense+ReLU, dense+ReLU, dense+softmax on a flat feature vector."""
    shape = net.shape_of(features) if features in net._shapes else None
    if shape is not None and len(shape) != 1:
        raise ShapeError(f"head needs flat features, {features!r} has shape {shape}")
    names = [
        net.add(Dense("fc1", sizes[0]), features, block="head"),
        net.add(Activation("fc1_relu", "relu"), block="head"),
        net.add(Dense("fc2", sizes[1]), block="head"),
        net.add(Activation("fc2_relu", "relu"), block="head"),
        net.add(Dense("fc3", sizes[2]), block="head"),
        net.add(Activation("predictions", "softmax"), block="head"),
    ]
    net.logits = "fc3"
    return names


class _Builder:
    """Adds layers and tracks shapes so builders can fail early on small inputs."""

    def __init__(self, spec: NetworkSpec):
        self.spec = spec
        h, w = spec.input_resolution
        self.net = Network((3, h, w), name=spec.backbone)
        self.rng = np.random.default_rng(0)

    def add(self, layer, inputs=None, **annot) -> str:
        net = self.net
        srcs = [net.output] if inputs is None else ([inputs] if isinstance(inputs, str) else list(inputs))
        try:
            shape = layer.build([net._shapes[s] for s in srcs], self.rng, np.float32)
        except ShapeError as exc:
            raise ArchitectureError(
                f"input resolution {self.spec.input_resolution} too small for {self.spec.backbone}: {exc}"
            ) from exc
        layer.params, layer.buffers = {}, {}
        name = net.add(layer, srcs, **annot)
        net._shapes[name] = tuple(shape)
        return name

    def conv_bn(self, name, filters, k, stride=1, padding="same", inputs=None, relu=True, **annot) -> str:
        out = self.add(Conv2D(name, filters, k, stride, padding), inputs, **annot)
        out = self.add(BatchNorm(f"{name}_bn"), out, **annot)
        if relu:
            out = self.add(Activation(f"{name}_relu", "relu"), out, **annot)
        return out

    def finish(self, features: str) -> Network:
        attach_head(self.net, features, self.spec.head_sizes)
        net = self.net
        net.spec = self.spec
        return net


# ---------------------------------------------------------------------------
# backbones


def _check_divisible(spec: NetworkSpec, by: int = 32) -> None:
    h, w = spec.input_resolution
    if h % by or w % by or h <= 0 or w <= 0:
        raise ArchitectureError(f"{spec.backbone} needs a resolution divisible by {by}, got {h}x{w}")


def build_vgg16(spec: NetworkSpec, seed: int = 0) -> Network:
    """Configuration-D VGG: 13 3x3 convolutions in five pooled blocks."""
    _check_divisible(spec)
    b = _Builder(spec)
    for i, block in enumerate(VGG16_PLAN, start=1):
        for j, filters in enumerate(block, start=1):
            name = f"block{i}_conv{j}"
            b.add(Conv2D(name, spec.channels(filters), 3, 1, "same"), block=f"block{i}")
            b.add(Activation(f"{name}_relu", "relu"), block=f"block{i}")
        b.add(MaxPool(f"block{i}_pool", 2, 2), block=f"block{i}")
    feats = b.add(Flatten("flatten"))
    return _init(b.finish(feats), spec, seed)


def build_resnet50(spec: NetworkSpec, seed: int = 0) -> Network:
    """Bottleneck ResNet50 (stride on the 3x3 convolution)."""
    _check_divisible(spec)
    b = _Builder(spec)
    b.conv_bn("conv1", spec.channels(64), 7, 2, 3, block="stem")
    x = b.add(MaxPool("pool1", 3, 2, 1), block="stem")
    for s, (filters, blocks, stride) in enumerate(RESNET50_STAGES, start=2):
        f = spec.channels(filters)
        for i in range(1, blocks + 1):
            tag = f"stage{s}_block{i}"
            st = stride if i == 1 else 1
            if i == 1:
                shortcut = b.conv_bn(f"{tag}_proj", 4 * f, 1, st, 0, inputs=x, relu=False,
                                     block=tag, branch="shortcut")
            else:
                shortcut = x
            y = b.conv_bn(f"{tag}_conv_a", f, 1, 1, 0, inputs=x, block=tag, branch="residual")
            y = b.conv_bn(f"{tag}_conv_b", f, 3, st, 1, inputs=y, block=tag, branch="residual")
            y = b.conv_bn(f"{tag}_conv_c", 4 * f, 1, 1, 0, inputs=y, relu=False, block=tag,
                          branch="residual")
            y = b.add(Add(f"{tag}_add"), [y, shortcut], block=tag)
            x = b.add(Activation(f"{tag}_out", "relu"), y, block=tag)
    feats = b.add(GlobalAvgPool("avg_pool"), x)
    net = _init(b.finish(feats), spec, seed)
    # every block starts as the identity; otherwise activations compound over
    # 16 blocks and early training depends heavily on the seed
    for layer in net.parameterized_layers():
        if layer.name.endswith("_conv_c_bn"):
            layer.params["gamma"].data[...] = 0
    return net


# branch widths (1x1, 3x3-reduce, 3x3, 5x5-reduce, 5x5, pool-proj)
_INCEPTION_A = ((64, 64, 96, 48, 64, 32), (64, 64, 96, 48, 64, 64), (64, 64, 96, 48, 64, 64))
_INCEPTION_B = ((192, 128, 192, 128, 192, 192),) * 4
_INCEPTION_C = ((320, 384, 768, 448, 768, 192),) * 2


def build_inception_v3(spec: NetworkSpec, seed: int = 0) -> Network:
    """Inception network whose blocks run 1x1, 3x3, 5x5 and pooled branches in parallel.

    The ``factorized`` variant replaces each 5x5 with two stacked 3x3s, as in
    the published V3 definition.
    """
    b = _Builder(spec)
    ch = spec.channels
    b.conv_bn("stem_conv1", ch(32), 3, 2, "same", block="stem")
    b.conv_bn("stem_conv2", ch(32), 3, 1, "same", block="stem")
    b.conv_bn("stem_conv3", ch(64), 3, 1, "same", block="stem")
    b.add(MaxPool("stem_pool1", 3, 2), block="stem")
    b.conv_bn("stem_conv4", ch(80), 1, 1, 0, block="stem")
    b.conv_bn("stem_conv5", ch(192), 3, 1, "same", block="stem")
    x = b.add(MaxPool("stem_pool2", 3, 2), block="stem")

    n = 0
    for widths in _INCEPTION_A:
        n += 1
        x = _inception_block(b, f"mixed{n}", x, [ch(c) for c in widths], spec.inception_variant)
    n += 1
    x = _reduction_block(b, f"mixed{n}", x, ch(384), (ch(64), ch(96), ch(96)))
    for widths in _INCEPTION_B:
        n += 1
        x = _inception_block(b, f"mixed{n}", x, [ch(c) for c in widths], spec.inception_variant)
    n += 1
    x = _reduction_block(b, f"mixed{n}", x, ch(320), (ch(192), ch(192), ch(192)), reduce_first=ch(192))
    for widths in _INCEPTION_C:
        n += 1
        x = _inception_block(b, f"mixed{n}", x, [ch(c) for c in widths], spec.inception_variant)
    feats = b.add(GlobalAvgPool("avg_pool"), x)
    return _init(b.finish(feats), spec, seed)


def _inception_block(b: _Builder, tag, x, widths, variant) -> str:
    c1, c3r, c3, c5r, c5, cp = widths
    kw = dict(block=tag)
    b1 = b.conv_bn(f"{tag}_b1_1x1", c1, 1, 1, 0, inputs=x, branch="1x1", **kw)
    b3 = b.conv_bn(f"{tag}_b3_1x1", c3r, 1, 1, 0, inputs=x, branch="3x3", **kw)
    b3 = b.conv_bn(f"{tag}_b3_3x3", c3, 3, 1, "same", inputs=b3, branch="3x3", **kw)
    b5 = b.conv_bn(f"{tag}_b5_1x1", c5r, 1, 1, 0, inputs=x, branch="5x5", **kw)
    if variant == "classic":
        b5 = b.conv_bn(f"{tag}_b5_5x5", c5, 5, 1, "same", inputs=b5, branch="5x5", **kw)
    else:
        b5 = b.conv_bn(f"{tag}_b5_3x3a", c5, 3, 1, "same", inputs=b5, branch="5x5", **kw)
        b5 = b.conv_bn(f"{tag}_b5_3x3b", c5, 3, 1, "same", inputs=b5, branch="5x5", **kw)
    bp = b.add(MaxPool(f"{tag}_bp_pool", 3, 1, 1), x, branch="pool", **kw)
    bp = b.conv_bn(f"{tag}_bp_1x1", cp, 1, 1, 0, inputs=bp, branch="pool", **kw)
    return b.add(Concat(f"{tag}_concat"), [b1, b3, b5, bp], **kw)


def _reduction_block(b: _Builder, tag, x, c3, dbl, reduce_first=None) -> str:
    kw = dict(block=tag)
    if reduce_first is None:
        r1 = b.conv_bn(f"{tag}_r1_3x3", c3, 3, 2, 0, inputs=x, branch="3x3", **kw)
    else:
        r1 = b.conv_bn(f"{tag}_r1_1x1", reduce_first, 1, 1, 0, inputs=x, branch="3x3", **kw)
        r1 = b.conv_bn(f"{tag}_r1_3x3", c3, 3, 2, 0, inputs=r1, branch="3x3", **kw)
    r2 = b.conv_bn(f"{tag}_r2_1x1", dbl[0], 1, 1, 0, inputs=x, branch="3x3dbl", **kw)
    r2 = b.conv_bn(f"{tag}_r2_3x3a", dbl[1], 3, 1, "same", inputs=r2, branch="3x3dbl", **kw)
    r2 = b.conv_bn(f"{tag}_r2_3x3b", dbl[2], 3, 2, 0, inputs=r2, branch="3x3dbl", **kw)
    rp = b.add(MaxPool(f"{tag}_rp_pool", 3, 2), x, branch="pool", **kw)
    return b.add(Concat(f"{tag}_concat"), [r1, r2, rp], **kw)


def _init(net: Network, spec: NetworkSpec, seed: int) -> Network:
    return net.build(seed, dtype=np.dtype(spec.dtype))


BUILDERS = {"vgg16": build_vgg16, "inception_v3": build_inception_v3, "resnet50": build_resnet50}


def build_network(spec: NetworkSpec, seed: int = 0) -> Network:
    """Build and He-uniform initialise the network described by ``spec``."""
    return BUILDERS[spec.backbone](spec, seed)


# ---------------------------------------------------------------------------
# graph audits


def last_conv_layer(net: Network) -> str:
    convs = net.of_kind("conv")
    if not convs:
        raise ArchitectureError("network has no convolutional layer")
    return convs[-1].name


def last_conv_block_output(net: Network) -> str:
    """Rectified output of the final convolutional block.

    Starts at the last convolution and follows its single consumer through
    batch-norm, activation, residual-add and branch-concat layers.
    """
    name = last_conv_layer(net)
    while True:
        consumers = [l for l in net.layers.values() if name in l.inputs]
        if len(consumers) != 1 or consumers[0].kind not in ("batchnorm", "activation", "add", "concat"):
            return name
        name = consumers[0].name


def vgg_channel_plan(net: Network) -> list[list[int]]:
    blocks: dict[str, list[int]] = {}
    for layer in net.of_kind("conv"):
        blocks.setdefault(layer.block, []).append(layer.filters)
    return list(blocks.values())


def residual_blocks(net: Network) -> dict[str, dict[str, int]]:
    """Per residual block: convolutions on the residual branch, shortcut convs and adds."""
    out: dict[str, dict[str, int]] = {}
    for layer in net:
        if not (layer.block or "").startswith("stage"):
            continue
        info = out.setdefault(layer.block, {"residual_convs": 0, "shortcut_convs": 0, "adds": 0})
        if layer.kind == "conv":
            info["residual_convs" if layer.branch == "residual" else "shortcut_convs"] += 1
        elif layer.kind == "add":
            info["adds"] += 1
    return out


def stage_block_counts(net: Network) -> tuple[int, ...]:
    counts: dict[str, int] = {}
    for block in residual_blocks(net):
        stage = block.split("_")[0]
        counts[stage] = counts.get(stage, 0) + 1
    return tuple(counts.values())


def inception_blocks(net: Network) -> dict[str, dict]:
    """Per concatenating block: input widths and the kernel sizes seen on each branch."""
    out: dict[str, dict] = {}
    for layer in net.of_kind("concat"):
        widths = [net.shape_of(s)[0] for s in layer.inputs]
        kernels: dict[str, set[int]] = {}
        for other in net:
            if other.block == layer.block and other.kind == "conv":
                kernels.setdefault(other.branch, set()).add(other.kernel_size)
        out[layer.block] = {
            "branch_widths": widths,
            "out_channels": net.shape_of(layer.name)[0],
            "branch_kernels": kernels,
            "branches": len(layer.inputs),
        }
    return out


def head_widths(net: Network) -> tuple[int, ...]:
    return tuple(layer.units for layer in net.of_kind("dense") if layer.block == "head")
