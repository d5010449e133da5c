"""Full-reference quality metrics on [0, 1] data and a key=value evaluation report.

All functions take cubes shaped ``[L, H, W]`` (a 2D array counts as one band)
and return plain floats. Band-wise metrics are averaged over bands.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .raster import as_cube

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
NORM_FLOOR = 1e-12


class MetricError(ValueError):
    pass


def _pair(pred, gt) -> tuple[np.ndarray, np.ndarray]:
    p = as_cube(pred).astype(np.float64)
    g = as_cube(gt).astype(np.float64)
    if p.shape != g.shape:
        raise MetricError(f"prediction shape {p.shape} differs from reference shape {g.shape}")
    return p, g


def psnr_bands(pred, gt) -> np.ndarray:
    p, g = _pair(pred, gt)
    mse = np.mean((p - g) ** 2, axis=(1, 2))
    with np.errstate(divide="ignore"):
        return np.where(mse == 0, np.inf, 10.0 * np.log10(1.0 / np.where(mse == 0, 1.0, mse)))


def psnr(pred, gt) -> float:
    """Mean over bands of ``10 log10(1 / MSE)`` with peak 1; an exact band gives ``inf``."""
    return float(np.mean(psnr_bands(pred, gt)))


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def _local_mean(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    # valid-mode weighted window average over the last two axes
    views = sliding_window_view(img, win.shape, axis=(-2, -1))
    return np.einsum("...ij,ij->...", views, win)


def ssim_bands(pred, gt) -> np.ndarray:
    p, g = _pair(pred, gt)
    if min(p.shape[1:]) < SSIM_WINDOW:
        raise MetricError(
            f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {p.shape[2]}x{p.shape[1]}"
        )
    win = gaussian_window()
    c1 = (SSIM_K1 * 1.0) ** 2
    c2 = (SSIM_K2 * 1.0) ** 2
    mu_p, mu_g = _local_mean(p, win), _local_mean(g, win)
    var_p = _local_mean(p * p, win) - mu_p**2
    var_g = _local_mean(g * g, win) - mu_g**2
    cov = _local_mean(p * g, win) - mu_p * mu_g
    smap = ((2 * mu_p * mu_g + c1) * (2 * cov + c2)) / ((mu_p**2 + mu_g**2 + c1) * (var_p + var_g + c2))
    return smap.mean(axis=(1, 2))


def ssim(pred, gt) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5, K1 0.01, K2 0.03, range 1), valid windows only."""
    return float(np.mean(ssim_bands(pred, gt)))


def cc_bands(pred, gt) -> np.ndarray:
    p, g = _pair(pred, gt)
    out = np.empty(p.shape[0])
    for b in range(p.shape[0]):
        dp = p[b] - p[b].mean()
        dg = g[b] - g[b].mean()
        denom = math.sqrt(float(np.sum(dp * dp)) * float(np.sum(dg * dg)))
        if denom == 0.0:
            # constant band: correlation is undefined, score exact agreement only
            out[b] = 1.0 if np.array_equal(p[b], g[b]) else 0.0
        else:
            out[b] = float(np.sum(dp * dg)) / denom
    return out


def cc(pred, gt) -> float:
    """Pearson correlation per band, averaged.

    Where either band is constant the band scores 1 if the two bands are
    identical and 0 otherwise.
    """
    return float(np.mean(cc_bands(pred, gt)))


def sam(pred, gt) -> float:
    """Mean spectral angle in radians; pixels with a near-zero vector count as 0.

    The angle is evaluated as ``2 atan2(|x^ - y^|, |x^ + y^|)`` on unit
    vectors, which equals the clamped arccos of the cosine but keeps full
    precision for nearly parallel spectra.
    """
    p, g = _pair(pred, gt)
    if p.shape[0] < 2:
        raise MetricError("SAM needs at least two bands")
    np_, ng = np.linalg.norm(p, axis=0), np.linalg.norm(g, axis=0)
    valid = (np_ >= NORM_FLOOR) & (ng >= NORM_FLOOR)
    up = p / np.where(valid, np_, 1.0)
    ug = g / np.where(valid, ng, 1.0)
    angle = 2.0 * np.arctan2(np.linalg.norm(up - ug, axis=0), np.linalg.norm(up + ug, axis=0))
    return float(np.mean(np.where(valid, angle, 0.0)))


def ergas_bands(pred, gt, scale: float) -> np.ndarray:
    """Per-band terms ``100/s * RMSE_l / mu_l``; ERGAS is their root mean square."""
    p, g = _pair(pred, gt)
    mu = g.mean(axis=(1, 2))
    bad = np.flatnonzero(mu <= NORM_FLOOR)
    if bad.size:
        raise MetricError(
            f"ERGAS undefined: reference band(s) {bad.tolist()} have mean <= {NORM_FLOOR}; "
            "rescale the data so every band has a positive mean"
        )
    rmse = np.sqrt(np.mean((p - g) ** 2, axis=(1, 2)))
    return 100.0 / scale * rmse / mu


def ergas(pred, gt, scale: float) -> float:
    terms = ergas_bands(pred, gt, scale)
    return float(np.sqrt(np.mean(terms**2)))


@dataclass
class MetricsReport:
    psnr: float
    ssim: float
    cc: float
    sam: float
    ergas: float
    time_s: float = 0.0
    psnr_bands: list[float] = field(default_factory=list)
    ssim_bands: list[float] = field(default_factory=list)
    cc_bands: list[float] = field(default_factory=list)
    ergas_bands: list[float] = field(default_factory=list)

    _KEYS = (("psnr_db", "psnr"), ("ssim", "ssim"), ("cc", "cc"), ("sam_rad", "sam"), ("ergas", "ergas"))

    def to_text(self) -> str:
        lines = [f"{key}={_fmt(getattr(self, attr))}" for key, attr in self._KEYS]
        lines.append(f"time_s={_fmt(self.time_s)}")
        for key, attr in self._KEYS:
            values = getattr(self, attr + "_bands", None)
            for i, v in enumerate(values or []):
                lines.append(f"{key}_b{i}={_fmt(v)}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricsReport":
        values: dict[str, float] = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise MetricError(f"line {n}: expected key=value, got {line!r}")
            values[key.strip()] = float(val)
        kwargs: dict = {attr: values[key] for key, attr in cls._KEYS}
        kwargs["time_s"] = values.get("time_s", 0.0)
        for key, attr in cls._KEYS:
            bands, i = [], 0
            while f"{key}_b{i}" in values:
                bands.append(values[f"{key}_b{i}"])
                i += 1
            if attr + "_bands" in {f.name for f in cls.__dataclass_fields__.values()}:
                kwargs[attr + "_bands"] = bands
        return cls(**kwargs)


def _fmt(v: float) -> str:
    return repr(float(v))


def evaluate(pred, gt, scale: float, time_s: float = 0.0) -> MetricsReport:
    """All five metrics plus the supplied prediction wall-clock time."""
    pb = psnr_bands(pred, gt)
    sb = ssim_bands(pred, gt)
    cb = cc_bands(pred, gt)
    eb = ergas_bands(pred, gt, scale)
    return MetricsReport(
        psnr=float(np.mean(pb)),
        ssim=float(np.mean(sb)),
        cc=float(np.mean(cb)),
        sam=sam(pred, gt),
        ergas=float(np.sqrt(np.mean(eb**2))),
        time_s=float(time_s),
        psnr_bands=[float(v) for v in pb],
        ssim_bands=[float(v) for v in sb],
        cc_bands=[float(v) for v in cb],
        ergas_bands=[float(v) for v in eb],
    )
