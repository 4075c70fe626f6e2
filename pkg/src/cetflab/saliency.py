"""GradCAM salient maps and the CAM-focus prior region that bounds the trigger search."""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InputError
from .micronet import Network
from .region import Region


@dataclass
class SalientMap:
    values: np.ndarray  # [H,W] in [0,1]
    layer: int
    class_id: int

    @property
    def empty(self) -> bool:
        return not np.any(self.values > 0)


@dataclass(frozen=True)
class PriorRegion:
    region: Region | None

    @property
    def empty(self) -> bool:
        return self.region is None


def _bilinear_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Row-interpolation matrix for half-pixel-centred bilinear resizing."""
    m = np.zeros((out_size, in_size))
    src = (np.arange(out_size) + 0.5) * in_size / out_size - 0.5
    src = np.clip(src, 0, in_size - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, in_size - 1)
    frac = src - lo
    m[np.arange(out_size), lo] += 1 - frac
    m[np.arange(out_size), hi] += frac
    return m


def upsample_bilinear(a: np.ndarray, height: int, width: int) -> np.ndarray:
    return _bilinear_matrix(height, a.shape[0]) @ a @ _bilinear_matrix(width, a.shape[1]).T


def gradcam(net: Network, image: np.ndarray, class_id: int | None = None, layer: int | None = None) -> SalientMap:
    """GradCAM on the last conv block's activation.

    Channel weights are the spatial means of d logit[class] / d A_k; the map is
    ReLU(sum_k w_k A_k), bilinearly upsampled to the image size and min-max
    normalised.  A map with no positive entry stays all-zero.  Runs in eval mode
    and leaves the network untouched.
    """
    image = np.asarray(image, dtype=np.float32)
    if layer is None:
        layer = net.last_conv_activation_index()
    logits, caches, acts = net._run(image[None], train=False, keep=True, record=True)
    if class_id is None:
        class_id = int(np.argmax(logits[0]))
    if not 0 <= class_id < net.num_classes:
        raise InputError(f"class {class_id} out of range")
    grad = np.zeros_like(logits)
    grad[0, class_id] = 1.0
    # gradient at the input of layer+1 is the gradient w.r.t. A
    _, d_act = net.backward(caches, grad, param_mask=(), need_input_grad=True, stop_at=layer + 1)
    act = acts[layer][:, 0].astype(np.float64)  # [K,h,w]
    d_act = d_act[:, 0].astype(np.float64)
    weights = d_act.mean(axis=(1, 2))
    cam = np.maximum(np.tensordot(weights, act, axes=1), 0.0)
    _, height, width = image.shape
    cam = upsample_bilinear(cam, height, width)
    hi, lo = cam.max(), cam.min()
    if hi <= 0:
        values = np.zeros((height, width))
    elif hi - lo <= 1e-12 * hi:
        values = np.ones((height, width))
    else:
        values = (cam - lo) / (hi - lo)
    return SalientMap(np.clip(values, 0.0, 1.0).astype(np.float32), layer, class_id)


def bounding_rect(mask: np.ndarray) -> Region | None:
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return None
    return Region(int(rows[0]), int(cols[0]), int(rows[-1] - rows[0] + 1), int(cols[-1] - cols[0] + 1))


def prior_region(smap: SalientMap | np.ndarray, threshold: float = 0.7, dilation_frac: float = 0.25) -> PriorRegion:
    """Bounding rectangle of pixels strictly above ``threshold``, each side pushed out by
    ``ceil(dilation_frac * side length)`` and clipped to the image."""
    if not 0.0 < threshold < 1.0:
        raise InputError("threshold must lie in (0,1)")
    values = smap.values if isinstance(smap, SalientMap) else np.asarray(smap)
    box = bounding_rect(values > threshold)
    if box is None:
        return PriorRegion(None)
    height, width = values.shape
    dr = math.ceil(dilation_frac * box.height)
    dc = math.ceil(dilation_frac * box.width)
    r0, c0 = max(box.row - dr, 0), max(box.col - dc, 0)
    r1, c1 = min(box.bottom + dr, height), min(box.right + dc, width)
    return PriorRegion(Region(r0, c0, r1 - r0, c1 - c0))


def write_pgm(smap: SalientMap | np.ndarray, path) -> Path:
    """Binary (P5) 8-bit grayscale dump of a map."""
    values = smap.values if isinstance(smap, SalientMap) else np.asarray(smap)
    h, w = values.shape
    pixels = np.clip(np.rint(values * 255), 0, 255).astype(np.uint8)
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())
    return path
