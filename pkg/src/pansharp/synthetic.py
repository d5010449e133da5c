"""Procedural MS/PAN scenes for tests, demos and the acceptance runs.

All bands share one high-frequency texture (edges from rectangles and discs,
oriented gratings) with band-specific gains and offsets, plus a smooth
band-specific field. PAN is a fixed weighted mean of the bands, so it
carries the spatial detail the low-resolution MS lacks.
"""

from __future__ import annotations

import numpy as np

from .rng import XorShift64Star


def _texture(rng: XorShift64Star, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    img = np.zeros((size, size))
    for _ in range(6 + size // 8):
        kind = rng.randbelow(2)
        cy, cx = rng.uniform() * size, rng.uniform() * size
        level = rng.uniform() * 2.0 - 1.0
        if kind == 0:
            hh, hw = (0.05 + 0.2 * rng.uniform()) * size, (0.05 + 0.2 * rng.uniform()) * size
            img += level * ((np.abs(yy - cy) < hh) & (np.abs(xx - cx) < hw))
        else:
            rad = (0.04 + 0.15 * rng.uniform()) * size
            img += level * ((yy - cy) ** 2 + (xx - cx) ** 2 < rad * rad)
    for _ in range(3):
        theta = rng.uniform() * np.pi
        period = 3.0 + 6.0 * rng.uniform()
        phase = rng.uniform() * 2 * np.pi
        img += 0.5 * np.sin(2 * np.pi * (xx * np.cos(theta) + yy * np.sin(theta)) / period + phase)
    img -= img.min()
    return img / max(img.max(), 1e-12)


def _smooth_field(rng: XorShift64Star, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    field = np.zeros((size, size))
    for _ in range(3):
        cy, cx = rng.uniform() * size, rng.uniform() * size
        sig = (0.2 + 0.3 * rng.uniform()) * size
        field += rng.uniform() * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig * sig))
    field -= field.min()
    return field / max(field.max(), 1e-12)


def pan_weights(bands: int) -> np.ndarray:
    w = 1.0 + 0.5 * np.sin(np.linspace(0.3, 2.8, bands))
    return w / w.sum()


def synthetic_scene(size: int = 64, bands: int = 4, seed: int = 0, spectral_variation: float = 1.0):
    """Return ``(ms_hr [L, size, size], pan [1, size, size])`` as float32 in [0.05, 0.95].

    ``spectral_variation`` scales how much bands differ beyond a constant
    offset: 0 gives bands that are shifted copies of one texture.
    """
    rng = XorShift64Star(seed)
    tex = _texture(rng, size)
    cube = np.empty((bands, size, size))
    for b in range(bands):
        gain = 0.6 + spectral_variation * 0.25 * (rng.uniform() - 0.5) * 2
        smooth = _smooth_field(rng, size)
        offset = 0.1 * rng.uniform()
        cube[b] = gain * tex + spectral_variation * 0.3 * smooth + offset
    cube -= cube.min()
    cube = 0.05 + 0.9 * cube / max(cube.max(), 1e-12)
    pan = np.tensordot(pan_weights(bands), cube, axes=1)[None]
    return cube.astype(np.float32), pan.astype(np.float32)
