"""Grad-CAM heatmaps and colour overlays."""
from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .architectures import last_conv_block_output
from .dataset import write_ppm
from .errors import BackwardError, GradCamError
from .nn import Network

# cold-to-hot ramp: dark blue, blue, cyan, yellow, red, dark red
RAMP_STOPS = np.array([0.0, 0.125, 0.375, 0.625, 0.875, 1.0])
RAMP_COLORS = np.array([
    [0.0, 0.0, 0.5],
    [0.0, 0.0, 1.0],
    [0.0, 1.0, 1.0],
    [1.0, 1.0, 0.0],
    [1.0, 0.0, 0.0],
    [0.5, 0.0, 0.0],
])


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray  # (h, w) in [0, 1]
    layer: str
    class_index: int
    sample_id: str = ""
    degenerate: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def _as_batch(image: np.ndarray, network: Network) -> np.ndarray:
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[-1] == 3 and img.shape[0] != 3:
        img = img.transpose(2, 0, 1)
    if img.dtype == np.uint8:
        img = img.astype(np.float32) / 255.0
    if img.shape != network.input_shape:
        raise GradCamError(f"image shape {img.shape} does not match network input {network.input_shape}")
    return img[None].astype(network.dtype)


def resolve_layer(network: Network, target_layer: str | None) -> str:
    name = target_layer or last_conv_block_output(network)
    if name not in network.layers:
        raise GradCamError(f"no layer named {name!r}")
    if len(network.shape_of(name)) != 3:
        raise GradCamError(f"layer {name!r} has no spatial feature map (shape {network.shape_of(name)})")
    return name


def gradcam(network: Network, image: np.ndarray, class_index: int, target_layer: str | None = None,
            sample_id: str = "") -> Heatmap:
    """Class-activation map of ``class_index`` at ``target_layer``.

    The class score is the pre-softmax output. Channel weights are the
    spatially averaged gradients of that score; the map is the rectified
    weighted channel sum, scaled so its maximum is 1.
    """
    if class_index not in (0, 1):
        raise GradCamError(f"class_index must be 0 or 1, got {class_index!r}")
    layer = resolve_layer(network, target_layer)
    score_layer = network.logits or network.output
    x = _as_batch(image, network)
    _, acts = network.forward(x, training=False, capture=[layer, score_layer], leaf=layer, detach_params=True)
    feat, logits = acts[layer], acts[score_layer]
    pick = np.zeros(logits.shape, dtype=logits.data.dtype)
    pick[0, class_index] = 1.0
    grad = None
    try:
        T.backward(T.tsum(T.mul(logits, T.Tensor(pick))))
        grad = feat.grad
    except BackwardError:
        pass  # score does not depend on the layer at all
    a = feat.data[0].astype(np.float64)
    if grad is None or not np.any(grad):
        return Heatmap(np.zeros(a.shape[1:]), layer, class_index, sample_id, degenerate=True)
    weights = grad[0].astype(np.float64).mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, a, axes=1), 0.0)
    peak = cam.max()
    if peak <= 0:
        return Heatmap(np.zeros_like(cam), layer, class_index, sample_id, degenerate=True)
    return Heatmap(cam / peak, layer, class_index, sample_id)


def upsample_bilinear(grid: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize with half-pixel centres and edge clamping."""
    grid = np.asarray(grid, dtype=np.float64)

    def axis(n_in, n_out):
        src = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = axis(grid.shape[0], size[0])
    x0, x1, fx = axis(grid.shape[1], size[1])
    rows = grid[y0] * (1 - fy)[:, None] + grid[y1] * fy[:, None]
    return rows[:, x0] * (1 - fx) + rows[:, x1] * fx


def colormap(values: np.ndarray) -> np.ndarray:
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.stack([np.interp(v, RAMP_STOPS, RAMP_COLORS[:, c]) for c in range(3)], axis=-1)


def overlay(image: np.ndarray, heatmap: Heatmap | np.ndarray, opacity: float = 0.4) -> np.ndarray:
    """Alpha-blend the colour-mapped heatmap over an (H, W, 3) uint8 image."""
    if not 0.0 <= opacity <= 1.0:
        raise GradCamError(f"opacity must be in [0, 1], got {opacity}")
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[-1] != 3 or image.dtype != np.uint8:
        raise GradCamError("overlay expects an (H, W, 3) uint8 image")
    if opacity == 0.0:
        return image.copy()
    grid = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    up = upsample_bilinear(grid, image.shape[:2])
    if up.shape != image.shape[:2]:
        raise GradCamError(f"upsampled map {up.shape} does not match image {image.shape[:2]}")
    blend = (1.0 - opacity) * image.astype(np.float64) + opacity * 255.0 * colormap(up)
    return np.clip(np.round(blend), 0, 255).astype(np.uint8)


def box_mass(heatmap: Heatmap | np.ndarray, size: tuple[int, int], bbox: tuple[int, int, int, int]
             ) -> tuple[float, float]:
    """Heatmap mass (upsampled to ``size``) inside and outside ``bbox = (y0, x0, y1, x1)``."""
    grid = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    up = upsample_bilinear(grid, size)
    y0, x0, y1, x1 = bbox
    inside = float(up[y0:y1, x0:x1].sum())
    return inside, float(up.sum()) - inside


def write_overlay(path: str | os.PathLike, image: np.ndarray, heatmap: Heatmap, opacity: float = 0.4) -> None:
    write_ppm(path, overlay(image, heatmap, opacity))


def write_heatmap_csv(path: str | os.PathLike, heatmap: Heatmap) -> None:
    np.savetxt(path, heatmap.values, delimiter=",", fmt="%.8f")
