import numpy as np
import pytest

from urolesion.architectures import (BACKBONES, NetworkSpec, build_network, head_widths, inception_blocks,
                                     last_conv_block_output, last_conv_layer, residual_blocks, scaled,
                                     stage_block_counts, vgg_channel_plan)
from urolesion.errors import ArchitectureError


def test_scaled_channels():
    assert scaled(64, 0.25) == 16
    assert scaled(20, 0.25) == 8
    assert scaled(2048, 1.0) == 2048


def test_spec_validation_and_round_trip():
    spec = NetworkSpec("resnet50", (64, 64), 0.25)
    assert NetworkSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ArchitectureError):
        NetworkSpec("alexnet")
    with pytest.raises(ArchitectureError):
        NetworkSpec("vgg16", width_scale=0)
    with pytest.raises(ArchitectureError):
        NetworkSpec("inception_v3", inception_variant="v4")


def test_vgg16_graph():
    net = build_network(NetworkSpec("vgg16", (32, 32), 1.0))
    assert len(net.of_kind("conv")) == 13
    assert len(net.of_kind("pool")) == 5
    assert vgg_channel_plan(net) == [[64] * 2, [128] * 2, [256] * 3, [512] * 3, [512] * 3]
    assert head_widths(net) == (2048, 1024, 2)


def test_resnet50_graph():
    net = build_network(NetworkSpec("resnet50", (32, 32), 0.125))
    assert stage_block_counts(net) == (3, 4, 6, 3)
    blocks = residual_blocks(net)
    assert all(b["residual_convs"] == 3 and b["adds"] == 1 for b in blocks.values())
    firsts = [name for name in blocks if name.endswith("block1")]
    assert all(blocks[n]["shortcut_convs"] == 1 for n in firsts)
    assert sum(b["shortcut_convs"] for b in blocks.values()) == 4


@pytest.mark.parametrize("variant,big", [("classic", 5), ("factorized", 3)])
def test_inception_branches(variant, big):
    net = build_network(NetworkSpec("inception_v3", (64, 64), 0.25, variant))
    core = {b: i for b, i in inception_blocks(net).items() if "1x1" in i["branch_kernels"]}
    assert len(core) >= 8
    for info in core.values():
        k = info["branch_kernels"]
        assert k["1x1"] == {1}
        assert 3 in k["3x3"]
        assert big in k["5x5"]
        assert sum(info["branch_widths"]) == info["out_channels"]


@pytest.mark.parametrize("arch", BACKBONES)
def test_forward_shapes_and_head(arch, rng):
    net = build_network(NetworkSpec(arch, (64, 64), 0.125))
    out = net.forward(rng.random((2, 3, 64, 64), dtype=np.float32))
    assert out.shape == (2, 2)
    assert net.logits == "fc3"
    assert head_widths(net) == (256, 128, 2)
    assert len(net.shape_of(last_conv_block_output(net))) == 3
    assert net.layers[last_conv_layer(net)].kind == "conv"


@pytest.mark.parametrize("arch,res", [("vgg16", (48, 48)), ("resnet50", (40, 64)), ("inception_v3", (8, 8))])
def test_too_small_or_misaligned_inputs_rejected(arch, res):
    with pytest.raises(ArchitectureError):
        build_network(NetworkSpec(arch, res, 0.125))


def test_build_is_seeded():
    spec = NetworkSpec("vgg16", (32, 32), 0.125)
    assert build_network(spec, 3).state_hash() == build_network(spec, 3).state_hash()
    assert build_network(spec, 3).state_hash() != build_network(spec, 4).state_hash()


def test_resnet_blocks_start_as_identity(rng):
    net = build_network(NetworkSpec("resnet50", (32, 32), 0.125), seed=5)
    gammas = [l.params["gamma"].data for l in net.parameterized_layers() if l.name.endswith("_conv_c_bn")]
    assert len(gammas) == 16 and all((g == 0).all() for g in gammas)
    # untrained scores still vary with the input
    x = rng.random((6, 3, 32, 32)).astype(np.float32)
    logits = net.forward(x, training=False).data
    assert np.ptp(logits[:, 1] - logits[:, 0]) > 1e-4
