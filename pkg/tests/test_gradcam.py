import numpy as np
import pytest

from urolesion.architectures import NetworkSpec, build_network
from urolesion.errors import GradCamError
from urolesion.gradcam import (RAMP_COLORS, Heatmap, box_mass, colormap, gradcam, overlay, resolve_layer,
                               upsample_bilinear, write_heatmap_csv, write_overlay)
from urolesion.nn import Activation, Conv2D, Dense, GlobalAvgPool, Network


def gap_net(head):
    """conv(1x1, one channel) -> relu -> GAP -> dense(2) with fixed weights."""
    net = Network((3, 4, 4))
    net.add(Conv2D("conv", 1, 1))
    net.add(Activation("act", "relu"))
    net.add(GlobalAvgPool("gap"))
    net.add(Dense("fc", 2))
    net.add(Activation("softmax", "softmax"))
    net.logits = "fc"
    net.build(0, np.float64)
    net["conv"].params["kernel"].data[...] = [[[[1.0]], [[0.0]], [[0.0]]]]
    net["conv"].params["bias"].data[...] = 0.0
    net["fc"].params["weight"].data[...] = [head]
    net["fc"].params["bias"].data[...] = 0.0
    return net


def test_single_channel_map_is_the_normalised_activation(rng):
    img = rng.random((3, 4, 4))
    hm = gradcam(gap_net([-1.0, 2.0]), img, 1, "act")
    np.testing.assert_allclose(hm.values, img[0] / img[0].max(), rtol=1e-12)
    assert not hm.degenerate and hm.layer == "act"


def test_negative_evidence_gives_degenerate_map(rng):
    hm = gradcam(gap_net([-1.0, 2.0]), rng.random((3, 4, 4)), 0, "act")
    assert hm.degenerate
    assert np.all(hm.values == 0)


def test_default_layer_and_errors(rng):
    net = build_network(NetworkSpec("vgg16", (32, 32), 0.125))
    img = rng.integers(0, 256, (32, 32, 3), dtype=np.uint8)
    hm = gradcam(net, img, 1)
    assert hm.layer == "block5_conv3_relu"
    assert hm.shape == (2, 2)
    assert 0 <= hm.values.min() and hm.values.max() <= 1
    with pytest.raises(GradCamError):
        resolve_layer(net, "nope")
    with pytest.raises(GradCamError):
        resolve_layer(net, "fc1")
    with pytest.raises(GradCamError):
        gradcam(net, img, 2)
    with pytest.raises(GradCamError):
        gradcam(net, img[:16], 1)


def test_upsample_keeps_peak_within_one_cell():
    for peak in [(0, 0), (1, 2), (3, 3)]:
        grid = np.zeros((4, 4))
        grid[peak] = 1.0
        up = upsample_bilinear(grid, (32, 32))
        y, x = np.unravel_index(np.argmax(up), up.shape)
        assert y // 8 == peak[0] and x // 8 == peak[1]
    np.testing.assert_allclose(upsample_bilinear(np.full((2, 3), 0.7), (5, 9)), 0.7)


def test_overlay_opacity_and_coldest_colour():
    img = np.full((8, 8, 3), 200, np.uint8)
    zero = Heatmap(np.zeros((2, 2)), "x", 1)
    np.testing.assert_array_equal(overlay(img, zero, 0.0), img)
    np.testing.assert_array_equal(overlay(img, zero, 1.0)[..., 2], 128)
    np.testing.assert_array_equal(overlay(img, zero, 1.0)[..., :2], 0)
    np.testing.assert_array_equal(colormap(np.zeros(3)), np.tile(RAMP_COLORS[0], (3, 1)))
    np.testing.assert_array_equal(colormap([1.0])[0], RAMP_COLORS[-1])
    with pytest.raises(GradCamError):
        overlay(img, zero, 1.5)
    with pytest.raises(GradCamError):
        overlay(img.astype(np.float32), zero)


def test_box_mass_and_writers(tmp_path):
    grid = np.zeros((4, 4))
    grid[:2, :2] = 1.0
    inside, outside = box_mass(grid, (8, 8), (0, 0, 4, 4))
    assert inside > outside > 0
    hm = Heatmap(grid, "x", 1)
    write_overlay(tmp_path / "o.ppm", np.zeros((8, 8, 3), np.uint8), hm)
    write_heatmap_csv(tmp_path / "h.csv", hm)
    np.testing.assert_allclose(np.loadtxt(tmp_path / "h.csv", delimiter=","), grid)
    assert (tmp_path / "o.ppm").read_bytes().startswith(b"P6\n8 8\n255\n")
