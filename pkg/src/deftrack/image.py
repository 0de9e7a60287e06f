"""Grayscale images, Gaussian pyramids, subpixel sampling and SSIM.

Intensities are stored as float64 in [0, 1]. Pixel (x, y) addresses column x
and row y; integer coordinates hit pixel centers exactly. Pyramid level L
uses coordinates scaled by ``scale_factor ** L`` with no half-pixel offset.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import cv2
import numpy as np
from scipy.ndimage import correlate1d

from .errors import BoundsError, DimensionError, ShapeError

BINOMIAL_KERNEL = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

# Rec.601 luma weights for R, G, B.
_LUMA = np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, eq=False)
class GrayImage:
    """Immutable row-major intensity image with values in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise DimensionError(f"expected a non-empty 2-D array, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("image contains non-finite intensities")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("intensities must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def from_uint8(cls, array: np.ndarray, channel_order: str = "bgr") -> "GrayImage":
        """Build from an 8-bit gray (H, W) or color (H, W, 3) array.

        Color input is reduced with Rec.601 luma. OpenCV decodes as BGR, hence
        the default channel order.
        """
        array = np.asarray(array)
        if array.ndim == 3:
            if array.shape[2] == 4:
                array = array[..., :3]
            weights = _LUMA if channel_order == "rgb" else _LUMA[::-1]
            gray = array.astype(np.float64) @ weights
        else:
            gray = array.astype(np.float64)
        return cls(np.clip(gray / 255.0, 0.0, 1.0))

    def to_uint8(self) -> np.ndarray:
        return np.clip(np.rint(self.data * 255.0), 0, 255).astype(np.uint8)


@dataclass(frozen=True, eq=False)
class ImagePyramid:
    levels: tuple[GrayImage, ...]
    scale_factor: float

    def __len__(self) -> int:
        return len(self.levels)

    def __getitem__(self, level: int) -> GrayImage:
        return self.levels[level]


@dataclass(frozen=True, eq=False)
class Patch:
    """Square window sampled around ``center`` at unit pixel spacing.

    ``intensities`` has shape (2*wy + 1, 2*wx + 1); ``gradients`` adds a
    trailing axis holding (d/dx, d/dy).
    """

    center: tuple[float, float]
    half_width: tuple[int, int]
    intensities: np.ndarray
    gradients: np.ndarray

    def __post_init__(self):
        wx, wy = self.half_width
        if self.intensities.shape != (2 * wy + 1, 2 * wx + 1):
            raise ShapeError("intensity count does not match the half width")
        if not (np.all(np.isfinite(self.intensities)) and np.all(np.isfinite(self.gradients))):
            raise ValueError("patch contains non-finite values")


def _blur(data: np.ndarray) -> np.ndarray:
    out = correlate1d(data, BINOMIAL_KERNEL, axis=0, mode="reflect")
    return correlate1d(out, BINOMIAL_KERNEL, axis=1, mode="reflect")


def build_pyramid(
    image: GrayImage, levels: int, scale_factor: float = 0.5, half_width: int = 0
) -> ImagePyramid:
    """Blur-and-subsample pyramid; level 0 is ``image`` itself.

    ``half_width`` is the tracking patch half size; every level must hold a
    full (2*half_width + 1) window.
    """
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if not 0.0 < scale_factor < 1.0:
        raise ValueError("scale_factor must lie in (0, 1)")
    min_side = 2 * half_width + 1
    out = [image]
    current = image.data
    for level in range(1, levels):
        blurred = _blur(current)
        if scale_factor == 0.5:
            current = blurred[::2, ::2]
        else:
            h = max(1, int(round(image.height * scale_factor**level)))
            w = max(1, int(round(image.width * scale_factor**level)))
            current = cv2.resize(blurred, (w, h), interpolation=cv2.INTER_LINEAR)
        out.append(GrayImage(np.clip(current, 0.0, 1.0)))
    coarsest = out[-1]
    if min(coarsest.width, coarsest.height) < min_side:
        raise DimensionError(
            f"level {levels - 1} is {coarsest.width}x{coarsest.height}, "
            f"smaller than the {min_side}x{min_side} patch"
        )
    return ImagePyramid(tuple(out), float(scale_factor))


def bilinear(data: np.ndarray, x, y) -> np.ndarray:
    """Vectorized bilinear lookup without bounds checks.

    Coordinates must already lie in [0, w-1] x [0, h-1].
    """
    h, w = data.shape
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    x0 = np.minimum(np.floor(x).astype(np.intp), max(w - 2, 0))
    y0 = np.minimum(np.floor(y).astype(np.intp), max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    top = data[y0, x0] * (1.0 - fx) + data[y0, x1] * fx
    bottom = data[y1, x0] * (1.0 - fx) + data[y1, x1] * fx
    return top * (1.0 - fy) + bottom * fy


def bilinear_gradient(data: np.ndarray, x, y) -> tuple[np.ndarray, np.ndarray]:
    """Central differences of bilinear samples; caller keeps a 1 px margin."""
    gx = 0.5 * (bilinear(data, x + 1.0, y) - bilinear(data, x - 1.0, y))
    gy = 0.5 * (bilinear(data, x, y + 1.0) - bilinear(data, x, y - 1.0))
    return gx, gy


def in_bounds(shape: tuple[int, int], x, y, margin: float = 0.0) -> np.ndarray:
    h, w = shape
    x = np.asarray(x)
    y = np.asarray(y)
    return (x >= margin) & (x <= w - 1 - margin) & (y >= margin) & (y <= h - 1 - margin)


def sample_bilinear(image: GrayImage, point: Sequence[float]) -> float:
    x, y = float(point[0]), float(point[1])
    if not in_bounds(image.data.shape, x, y):
        raise BoundsError(f"({x}, {y}) outside {image.width}x{image.height} image")
    return float(bilinear(image.data, x, y))


def image_gradient(image: GrayImage, point: Sequence[float]) -> tuple[float, float]:
    x, y = float(point[0]), float(point[1])
    if not in_bounds(image.data.shape, x, y, margin=1.0):
        raise BoundsError(f"gradient at ({x}, {y}) needs a 1 px margin")
    gx, gy = bilinear_gradient(image.data, x, y)
    return float(gx), float(gy)


def patch_offsets(half_width: int | tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
    """Flattened (dx, dy) offsets of a patch window in row-major order."""
    if np.isscalar(half_width):
        wx = wy = int(half_width)
    else:
        wx, wy = (int(v) for v in half_width)
    dy, dx = np.mgrid[-wy : wy + 1, -wx : wx + 1]
    return dx.ravel().astype(np.float64), dy.ravel().astype(np.float64)


def extract_patch(
    pyramid: ImagePyramid,
    level: int,
    center: Sequence[float],
    half_width: int | tuple[int, int],
) -> Patch:
    """Sample a patch around ``center`` given in ``level`` coordinates."""
    img = pyramid[level]
    if np.isscalar(half_width):
        wx = wy = int(half_width)
    else:
        wx, wy = (int(v) for v in half_width)
    cx, cy = float(center[0]), float(center[1])
    h, w = img.data.shape
    if cx - wx < 1.0 or cx + wx > w - 2 or cy - wy < 1.0 or cy + wy > h - 2:
        raise BoundsError(f"patch at ({cx}, {cy}) with half width {(wx, wy)} leaves level {level}")
    dx, dy = patch_offsets((wx, wy))
    xs, ys = cx + dx, cy + dy
    values = bilinear(img.data, xs, ys).reshape(2 * wy + 1, 2 * wx + 1)
    gx, gy = bilinear_gradient(img.data, xs, ys)
    grads = np.stack([gx, gy], axis=-1).reshape(2 * wy + 1, 2 * wx + 1, 2)
    return Patch((cx, cy), (wx, wy), values, grads)


def ssim_values(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Single-window SSIM along the last axis; leading axes are batched."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mu_a = a.mean(axis=-1)
    mu_b = b.mean(axis=-1)
    da = a - mu_a[..., None]
    db = b - mu_b[..., None]
    var_a = (da * da).mean(axis=-1)
    var_b = (db * db).mean(axis=-1)
    cov = (da * db).mean(axis=-1)
    num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2)
    den = (mu_a**2 + mu_b**2 + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return num / den


def ssim(a: Patch | np.ndarray, b: Patch | np.ndarray) -> float:
    va = a.intensities if isinstance(a, Patch) else np.asarray(a)
    vb = b.intensities if isinstance(b, Patch) else np.asarray(b)
    if va.shape != vb.shape:
        raise ShapeError(f"patch shapes differ: {va.shape} vs {vb.shape}")
    return float(ssim_values(va.ravel(), vb.ravel()))
