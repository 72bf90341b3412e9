"""Saliency heatmaps for the regression score and overlay export.

The heatmap follows the gradient-weighted activation-map recipe adapted
to regression: gradients of the raw scalar score are taken w.r.t. the
activations of the final convolution stage, channel weights are their
spatial means, and the weighted activation sum passes through ReLU
before bilinear upsampling and min-max normalization.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import CheckpointError, DataIOError, DimensionError
from .imageops import GrayImage, _resize_bilinear_array
from .model import SarcNetParams, sarcnet_forward
from .optim import zero_grads

HEATMAP_MAGIC = b"HMAP"


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray  # (H, W) float32 in [0, 1]

    def __post_init__(self):
        v = self.values
        if v.ndim != 2:
            raise DimensionError(f"heatmap must be 2-d, got {v.shape}")
        if not np.all(np.isfinite(v)) or v.min() < 0.0 or v.max() > 1.0:
            raise DimensionError("heatmap values must be finite and in [0,1]")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def _normalize(raw: np.ndarray) -> np.ndarray:
    lo, hi = float(raw.min()), float(raw.max())
    if hi <= 0.0:
        return np.zeros_like(raw)
    if hi - lo <= 0.0:
        return np.ones_like(raw)
    return (raw - lo) / (hi - lo)


def gradcam(params: SarcNetParams, image: Tensor, features: Tensor) -> Heatmap:
    """Saliency heatmap for a single cell at model-input resolution.

    Side effect: parameter gradients are cleared afterwards (the score's
    backward pass necessarily flows through them).
    """
    img = image if image.ndim == 4 else Tensor(image.data[None])
    fv = features if features.ndim == 2 else Tensor(features.data[None])
    if img.shape[0] != 1 or fv.shape[0] != 1:
        raise DimensionError("gradcam explains exactly one cell at a time")
    capture: dict = {}
    score = sarcnet_forward(img, fv, params, mode="eval", capture=capture)
    score.backward()
    act = capture["final_stage"]
    weights = act.grad.mean(axis=(2, 3))          # [1, C]
    raw = (weights[:, :, None, None] * act.data).sum(axis=1)[0]
    raw = np.maximum(raw, 0.0)
    zero_grads(params.tensors)
    size = params.config.input_size
    upsampled = _resize_bilinear_array(raw.astype(np.float64), size, size)
    upsampled = np.maximum(upsampled, 0.0)  # guard interpolation round-off
    return Heatmap(_normalize(upsampled).astype(np.float32))


def _blue_red(values: np.ndarray) -> np.ndarray:
    """Fixed linear colormap: 0 -> pure blue, 1 -> pure red."""
    rgb = np.zeros(values.shape + (3,), dtype=np.float64)
    rgb[..., 0] = values
    rgb[..., 2] = 1.0 - values
    return rgb


OVERLAY_ALPHA = 0.5


def overlay(image: GrayImage, heatmap: Heatmap, path) -> None:
    """Blend the grayscale base with the blue->red heatmap at 50% alpha."""
    if (image.height, image.width) != (heatmap.height, heatmap.width):
        raise DimensionError(
            f"image {image.pixels.shape} and heatmap "
            f"{heatmap.values.shape} dimensions differ"
        )
    base = np.repeat(image.pixels[:, :, None], 3, axis=2)
    blended = (1.0 - OVERLAY_ALPHA) * base \
        + OVERLAY_ALPHA * _blue_red(heatmap.values.astype(np.float64))
    from PIL import Image
    try:
        Image.fromarray((np.clip(blended, 0, 1) * 255.0 + 0.5)
                        .astype(np.uint8)).save(path)
    except OSError as exc:
        raise DataIOError(f"cannot write overlay {path}: {exc}") from exc


def write_heatmap(heatmap: Heatmap, path) -> None:
    """Raw dump: 16-byte header (magic, height, width, reserved) + f32 LE."""
    try:
        with open(path, "wb") as fh:
            fh.write(struct.pack("<4sIII", HEATMAP_MAGIC, heatmap.height,
                                 heatmap.width, 0))
            fh.write(heatmap.values.astype("<f4").tobytes())
    except OSError as exc:
        raise DataIOError(f"cannot write heatmap {path}: {exc}") from exc


def read_heatmap(path) -> Heatmap:
    try:
        with open(path, "rb") as fh:
            header = fh.read(16)
            if len(header) != 16 or header[:4] != HEATMAP_MAGIC:
                raise CheckpointError(f"{path} is not a heatmap dump")
            _, h, w, _ = struct.unpack("<4sIII", header)
            data = fh.read(4 * h * w)
            if len(data) != 4 * h * w:
                raise CheckpointError(f"heatmap dump {path} truncated")
    except OSError as exc:
        raise DataIOError(f"cannot read heatmap {path}: {exc}") from exc
    return Heatmap(np.frombuffer(data, dtype="<f4").reshape(h, w).copy())
