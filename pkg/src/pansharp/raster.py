"""The image cube carried between pipeline stages."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np


@dataclass
class RasterVolume:
    """``W x H x L`` float32 cube, stored band-sequential as ``pixels[L, H, W]``.

    The constructor keeps values as given (resampling may overshoot [0, 1]);
    use :meth:`ingest` when reading external data, which clamps.
    """

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim == 2:
            px = px[None]
        if px.ndim != 3 or min(px.shape) < 1:
            raise ValueError(f"raster must be [L, H, W] with positive extents, got {px.shape}")
        self.pixels = px

    @property
    def width(self) -> int:
        return self.pixels.shape[2]

    @property
    def height(self) -> int:
        return self.pixels.shape[1]

    @property
    def bands(self) -> int:
        return self.pixels.shape[0]

    @classmethod
    def ingest(cls, pixels) -> "RasterVolume":
        px = np.asarray(pixels, dtype=np.float32)
        lo, hi = float(np.min(px)), float(np.max(px))
        if lo < 0.0 or hi > 1.0 or not np.all(np.isfinite(px)):
            warnings.warn(f"raster values outside [0, 1] (range {lo:.4g}..{hi:.4g}); clamping")
            px = np.clip(np.nan_to_num(px, nan=0.0), 0.0, 1.0)
        return cls(px)

    def clamped(self) -> "RasterVolume":
        return RasterVolume(np.clip(self.pixels, 0.0, 1.0))

    def band(self, i: int) -> np.ndarray:
        return self.pixels[i]


def as_cube(img) -> np.ndarray:
    """Return ``[L, H, W]`` pixels from a RasterVolume or array (2D becomes one band)."""
    if isinstance(img, RasterVolume):
        return img.pixels
    arr = np.asarray(img)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ValueError(f"expected [L, H, W] or [H, W], got shape {arr.shape}")
    return arr


def like(template, cube: np.ndarray):
    """Wrap ``cube`` the same way ``template`` was given (RasterVolume, 2D or 3D array)."""
    if isinstance(template, RasterVolume):
        return RasterVolume(cube)
    if np.ndim(template) == 2:
        return cube[0]
    return cube
