"""Image and mask I/O, bilinear resizing, and model-input normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .autodiff import Tensor
from .errors import DataIOError, DegenerateInputError, DimensionError

MIN_IMAGE_SIDE = 8
MIN_MASK_PIXELS = 16


@dataclass(frozen=True)
class GrayImage:
    """Single-channel image with intensities scaled into [0, 1]."""

    pixels: np.ndarray  # (H, W) float

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 2:
            raise DimensionError(f"GrayImage expects 2-d pixels, got {px.shape}")
        if px.shape[0] < MIN_IMAGE_SIDE or px.shape[1] < MIN_IMAGE_SIDE:
            raise DimensionError(
                f"image of shape {px.shape} is below the {MIN_IMAGE_SIDE}px minimum"
            )
        lo, hi = float(px.min()), float(px.max())
        if lo < 0.0 or hi > 1.0:
            raise DimensionError(
                f"GrayImage intensities must lie in [0,1], got [{lo}, {hi}]"
            )

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]


@dataclass(frozen=True)
class CellMask:
    """Binary foreground mask of a single cell."""

    membership: np.ndarray  # (H, W) bool

    def __post_init__(self):
        m = self.membership
        if m.ndim != 2 or m.dtype != bool:
            raise DimensionError("CellMask expects a 2-d boolean array")
        if int(m.sum()) < MIN_MASK_PIXELS:
            raise DegenerateInputError(
                f"mask has {int(m.sum())} foreground pixels, "
                f"minimum is {MIN_MASK_PIXELS}"
            )

    @property
    def height(self) -> int:
        return self.membership.shape[0]

    @property
    def width(self) -> int:
        return self.membership.shape[1]

    @property
    def area(self) -> int:
        return int(self.membership.sum())


def _to_unit_range(arr: np.ndarray) -> np.ndarray:
    """Map integer sample ranges linearly onto [0, 1]."""
    if arr.dtype == np.uint8:
        return arr.astype(np.float32) / 255.0
    if arr.dtype == np.uint16:
        return arr.astype(np.float32) / 65535.0
    if np.issubdtype(arr.dtype, np.integer):
        # Pillow reads 16-bit grayscale as int32 ("I" mode).
        maxval = 65535.0 if arr.max() > 255 else 255.0
        return np.clip(arr.astype(np.float32) / maxval, 0.0, 1.0)
    return np.clip(arr.astype(np.float32), 0.0, 1.0)


def load_image(path, channel: int = 0) -> GrayImage:
    """Load an 8/16-bit grayscale PNG/TIFF as a GrayImage.

    Multi-channel files are reduced by taking ``channel`` (default 0,
    the tagged-protein channel in this pipeline's manifests).
    """
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataIOError(f"cannot read image {path}: {exc}") from exc
    if arr.ndim == 3:
        if channel >= arr.shape[2]:
            raise DataIOError(
                f"{path}: requested channel {channel} of {arr.shape[2]}"
            )
        arr = arr[:, :, channel]
    elif arr.ndim != 2:
        raise DataIOError(f"{path}: unsupported image layout {arr.shape}")
    return GrayImage(_to_unit_range(arr))


def load_mask(path) -> CellMask:
    """Load a mask PNG: any nonzero pixel is foreground."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataIOError(f"cannot read mask {path}: {exc}") from exc
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    return CellMask(arr > 0)


def load_label_map(path) -> np.ndarray:
    """Load a per-pixel integer label map (stored as 8-bit PNG)."""
    try:
        with Image.open(path) as im:
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataIOError(f"cannot read label map {path}: {exc}") from exc
    if arr.ndim == 3:
        arr = arr[:, :, 0]
    return arr.astype(np.int64)


def save_gray_png(pixels: np.ndarray, path, bit_depth: int = 16) -> None:
    """Write a [0,1] float array as an 8- or 16-bit grayscale PNG."""
    arr = np.clip(pixels, 0.0, 1.0)
    try:
        if bit_depth == 16:
            Image.fromarray((arr * 65535.0 + 0.5).astype(np.uint16)).save(path)
        else:
            Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8)).save(path)
    except OSError as exc:
        raise DataIOError(f"cannot write image {path}: {exc}") from exc


def save_label_png(labels: np.ndarray, path) -> None:
    try:
        Image.fromarray(labels.astype(np.uint8)).save(path)
    except OSError as exc:
        raise DataIOError(f"cannot write label map {path}: {exc}") from exc


def resize_bilinear(img: GrayImage, out_h: int, out_w: int) -> GrayImage:
    """Bilinear resample (half-pixel-center convention, no corner alignment).

    Being a convex blend of neighbors, output values never leave the
    input's [min, max] range, and resizing to the same size is the
    identity.
    """
    if out_h < MIN_IMAGE_SIDE or out_w < MIN_IMAGE_SIDE:
        raise DimensionError(
            f"target size {out_h}x{out_w} is below the {MIN_IMAGE_SIDE}px minimum"
        )
    return GrayImage(_resize_bilinear_array(img.pixels, out_h, out_w))


def _resize_bilinear_array(px: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    in_h, in_w = px.shape
    ys = (np.arange(out_h, dtype=np.float64) + 0.5) * (in_h / out_h) - 0.5
    xs = (np.arange(out_w, dtype=np.float64) + 0.5) * (in_w / out_w) - 0.5
    ys = np.clip(ys, 0.0, in_h - 1.0)
    xs = np.clip(xs, 0.0, in_w - 1.0)
    y0 = np.floor(ys).astype(np.intp)
    x0 = np.floor(xs).astype(np.intp)
    y1 = np.minimum(y0 + 1, in_h - 1)
    x1 = np.minimum(x0 + 1, in_w - 1)
    wy = (ys - y0)[:, None]
    wx = (xs - x0)[None, :]
    top = px[np.ix_(y0, x0)] * (1 - wx) + px[np.ix_(y0, x1)] * wx
    bot = px[np.ix_(y1, x0)] * (1 - wx) + px[np.ix_(y1, x1)] * wx
    out = top * (1 - wy) + bot * wy
    return out.astype(px.dtype, copy=False)


def resize_mask(mask: CellMask, out_h: int, out_w: int) -> CellMask:
    """Resize a mask by thresholding its bilinear interpolation at 0.5."""
    soft = _resize_bilinear_array(mask.membership.astype(np.float32), out_h, out_w)
    return CellMask(soft > 0.5)


STD_FLOOR = 1e-6


def to_model_input(img: GrayImage, dtype=np.float32) -> Tensor:
    """Standardize per image and replicate to 3 identical channels.

    Subtracting the image mean and dividing by its standard deviation
    (floored at 1e-6) makes the result invariant to affine intensity
    rescaling; a constant image maps to all zeros.
    """
    px = img.pixels.astype(np.float64)
    std = px.std()
    if std < STD_FLOOR:
        normed = np.zeros_like(px)
    else:
        normed = (px - px.mean()) / std
    stacked = np.repeat(normed[None, :, :], 3, axis=0).astype(dtype)
    return Tensor(stacked)


def gaussian_blur(px: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with reflect padding."""
    if sigma <= 0:
        return px.copy()
    radius = max(1, int(3.0 * sigma + 0.5))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-0.5 * (t / sigma) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(px.astype(np.float64), radius, mode="reflect")
    rows = np.apply_along_axis(np.convolve, 1, padded, kernel, mode="valid")
    out = np.apply_along_axis(np.convolve, 0, rows, kernel, mode="valid")
    return out.astype(px.dtype, copy=False)
