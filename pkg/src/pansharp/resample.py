"""Bicubic resampling by integer factors and Wald-protocol degradation.

Conventions: Keys cubic convolution (a = -0.5), half-pixel centers,
clamp-to-edge boundaries, separable along X then Y. Downsampling widens the
kernel by the scale factor and renormalizes each output pixel's weights.
No clamping to [0, 1] happens here.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .raster import as_cube, like

DEFAULT_A = -0.5


@dataclass(frozen=True)
class ResamplePlan:
    scale: int
    direction: str  # "up" | "down"
    a: float = DEFAULT_A

    def __post_init__(self):
        if int(self.scale) != self.scale or self.scale < 2:
            raise ValueError(f"scale must be an integer >= 2, got {self.scale}")
        if self.direction not in ("up", "down"):
            raise ValueError(f"direction must be 'up' or 'down', got {self.direction!r}")

    def matrix(self, n_in: int) -> np.ndarray:
        if self.direction == "up":
            return _up_matrix(n_in, int(self.scale), float(self.a))
        return _down_matrix(n_in, int(self.scale), float(self.a))

    def apply(self, img):
        cube = as_cube(img)
        _, h, w = cube.shape
        ry, rx = self.matrix(h), self.matrix(w)
        data = cube.astype(np.float64)
        out = np.einsum("oh,lhw,pw->lop", ry, data, rx, optimize=True)
        dtype = cube.dtype if cube.dtype in (np.float32, np.float64) else np.float32
        return like(img, out.astype(dtype))


def cubic_kernel(t, a: float = DEFAULT_A):
    """Keys cubic convolution weight at offset ``t``."""
    t = np.abs(np.asarray(t, dtype=np.float64))
    t2, t3 = t * t, t * t * t
    near = (a + 2.0) * t3 - (a + 3.0) * t2 + 1.0
    far = a * t3 - 5.0 * a * t2 + 8.0 * a * t - 4.0 * a
    w = np.where(t <= 1.0, near, np.where(t < 2.0, far, 0.0))
    return w if w.ndim else float(w)


@lru_cache(maxsize=64)
def _up_matrix(n_in: int, s: int, a: float) -> np.ndarray:
    n_out = n_in * s
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        u = (o + 0.5) / s - 0.5
        base = int(np.floor(u))
        for j in range(base - 1, base + 3):
            m[o, min(max(j, 0), n_in - 1)] += cubic_kernel(u - j, a)
    m.setflags(write=False)
    return m


@lru_cache(maxsize=64)
def _down_matrix(n_in: int, s: int, a: float) -> np.ndarray:
    if n_in % s:
        raise ValueError(
            f"extent {n_in} is not divisible by scale {s}; pad by {(-n_in) % s} pixels"
        )
    n_out = n_in // s
    m = np.zeros((n_out, n_in))
    for o in range(n_out):
        u = (o + 0.5) * s - 0.5
        lo = int(np.floor(u - 2 * s)) + 1
        hi = int(np.ceil(u + 2 * s)) - 1
        taps = np.arange(lo, hi + 1)
        w = cubic_kernel((u - taps) / s, a)
        w = w / w.sum()
        for j, wj in zip(taps, w):
            m[o, min(max(j, 0), n_in - 1)] += wj
    m.setflags(write=False)
    return m


def _check(img, s: int) -> None:
    cube = as_cube(img)
    if cube.size == 0:
        raise ValueError("cannot resample an empty image")


def upsample_bicubic(img, s: int, a: float = DEFAULT_A):
    """Enlarge every band by ``s`` in X and Y."""
    _check(img, s)
    return ResamplePlan(s, "up", a).apply(img)


def downsample_bicubic(img, s: int, a: float = DEFAULT_A):
    """Anti-aliased shrink by ``s``; width and height must be multiples of ``s``."""
    _check(img, s)
    _, h, w = as_cube(img).shape
    if h % s or w % s:
        raise ValueError(
            f"image {w}x{h} is not divisible by scale {s}; pad to "
            f"{w + (-w) % s}x{h + (-h) % s}"
        )
    return ResamplePlan(s, "down", a).apply(img)


def wald_degrade(ms_hr, pan_hr, s: int):
    """Build a reduced-resolution training triple ``(ms_lr, pan_hr, ms_hr)``.

    The high-resolution MS cube becomes the ground truth; PAN is kept.
    """
    ms = as_cube(ms_hr)
    pan = as_cube(pan_hr)
    if pan.shape[0] != 1:
        raise ValueError(f"PAN must have exactly one band, got {pan.shape[0]}")
    if ms.shape[1:] != pan.shape[1:]:
        raise ValueError(
            f"MS {ms.shape[2]}x{ms.shape[1]} and PAN {pan.shape[2]}x{pan.shape[1]} "
            "must share the high-resolution grid"
        )
    return downsample_bicubic(ms_hr, s), pan_hr, ms_hr


def up_down(pan, s: int):
    """PAN downsampled then upsampled by ``s`` (domain-matched to upsampled MS)."""
    return upsample_bicubic(downsample_bicubic(pan, s), s)


__all__ = [
    "ResamplePlan",
    "cubic_kernel",
    "upsample_bicubic",
    "downsample_bicubic",
    "wald_degrade",
    "up_down",
]
