"""Built-in consistency checks: gradients, metric oracles, attention invariants.

Every check returns a list of ``(name, passed, detail)`` rows; ``run_all``
concatenates them. The checks use tiny shapes so the whole run takes seconds.
"""

from __future__ import annotations

import math

import numpy as np

from . import metrics
from . import numcore as nc
from .fusion import FusionConfig, FusionNet
from .resample import up_down
from .rng import XorShift64Star
from .texture import TextureTransformer, TTConfig, attention

Row = tuple[str, bool, str]


def _grad_rows(tag: str, report: nc.GradCheckReport) -> list[Row]:
    name, err = report.worst
    silent = report.silent
    detail = f"worst {name} rel err {err:.2e}, {sum(report.kinks.values())} kink element(s) skipped"
    if silent:
        detail += f"; zero gradient in {', '.join(silent)}"
    return [(f"grad {tag}", report.passed and not silent, detail)]


def check_fusion_gradients(seed: int = 0) -> list[Row]:
    rng = XorShift64Star(seed)
    net = FusionNet(2, FusionConfig(channels=2, blocks=1, seed=seed)).astype(np.float64)
    net.randomize(seed + 1)
    ms = rng.uniform_array((1, 2, 4, 4))
    pan = rng.uniform_array((1, 1, 4, 4))
    gt = rng.uniform_array((1, 2, 4, 4))
    report = nc.grad_check(lambda: nc.l1_loss(net.forward(ms, pan), gt), net.params)
    return _grad_rows(f"fusion seed={seed}", report)


def check_texture_gradients(seed: int = 0) -> list[Row]:
    rng = XorShift64Star(seed)
    tt = TextureTransformer(TTConfig(channels=3, seed=seed)).astype(np.float64)
    tt.randomize(seed + 1)
    sr = rng.uniform_array((2, 5, 5))
    lr_up = rng.uniform_array((2, 5, 5))
    pan = rng.uniform_array((1, 5, 5))
    pan_ud = rng.uniform_array((1, 5, 5))
    gt = rng.uniform_array((2, 5, 5))
    report = nc.grad_check(lambda: nc.l1_loss(tt.forward(sr, lr_up, pan, pan_ud)[0], gt), tt.params)
    return _grad_rows(f"texture seed={seed}", report)


def _psnr_oracle(p, g):
    vals = []
    for b in range(p.shape[0]):
        se = sum((p[b, i, j] - g[b, i, j]) ** 2 for i in range(p.shape[1]) for j in range(p.shape[2]))
        mse = se / (p.shape[1] * p.shape[2])
        vals.append(math.inf if mse == 0 else 10 * math.log10(1 / mse))
    return sum(vals) / len(vals)


def _sam_oracle(p, g):
    total = 0.0
    for i in range(p.shape[1]):
        for j in range(p.shape[2]):
            x, y = p[:, i, j], g[:, i, j]
            nx = math.sqrt(sum(v * v for v in x))
            ny = math.sqrt(sum(v * v for v in y))
            if nx < 1e-12 or ny < 1e-12:
                continue
            c = sum(a * b for a, b in zip(x, y)) / (nx * ny)
            total += math.acos(max(-1.0, min(1.0, c)))
    return total / (p.shape[1] * p.shape[2])


def check_metrics(seed: int = 0) -> list[Row]:
    rng = XorShift64Star(seed)
    g = rng.uniform_array((3, 4, 4), 0.1, 0.9)
    p = g + rng.uniform_array((3, 4, 4), -0.05, 0.05)
    rows = []
    err = abs(metrics.psnr(p, g) - _psnr_oracle(p, g))
    rows.append(("metric psnr oracle", err <= 1e-9, f"diff {err:.1e}"))
    err = abs(metrics.sam(p, g) - _sam_oracle(p, g))
    rows.append(("metric sam oracle", err <= 1e-9, f"diff {err:.1e}"))
    big = rng.uniform_array((2, 12, 12), 0.1, 0.9)
    ideal = metrics.evaluate(big, big, 4)
    ok = (
        ideal.psnr == math.inf
        and abs(ideal.ssim - 1) < 1e-12
        and ideal.cc == 1.0
        and ideal.sam == 0.0
        and ideal.ergas == 0.0
    )
    rows.append(("metric identity ideals", ok, f"{ideal.psnr} {ideal.ssim} {ideal.cc} {ideal.sam} {ideal.ergas}"))
    return rows


def check_attention(seed: int = 0) -> list[Row]:
    """Self-reference matching: query source equals key source, so h must be the identity."""
    rng = XorShift64Star(seed)
    tt = TextureTransformer(TTConfig(channels=4, seed=seed)).astype(np.float64)
    tt.randomize(seed + 1)
    pan = rng.uniform_array((1, 16, 16))
    res = attention(tt, up_down(pan, tt.cfg.scale), pan)
    n = res.relevance.shape[0]
    ident = bool(np.array_equal(res.hard, np.arange(n)))
    rows = [
        ("attention self-reference identity", ident, f"{int(np.sum(res.hard == np.arange(n)))}/{n} fixed"),
        ("attention self-reference soft", float(res.soft.min()) >= 1 - 1e-6, f"min s {res.soft.min():.8f}"),
        ("attention relevance bound", float(np.abs(res.relevance).max()) <= 1 + 1e-5, ""),
        (
            "attention soft equals selected relevance",
            bool(np.array_equal(res.soft, res.relevance[np.arange(n), res.hard])),
            "",
        ),
    ]
    return rows


def run_all(seeds: int = 2) -> list[Row]:
    rows: list[Row] = []
    for s in range(seeds):
        rows += check_fusion_gradients(s)
        rows += check_texture_gradients(s)
    rows += check_metrics()
    rows += check_attention()
    return rows
