"""Step 1: residual 3D-convolutional fusion of upsampled MS with PAN.

The upsampled MS cube and PAN are concatenated, mixed back to ``L`` channels
by a 1x1 convolution, and treated as a one-channel volume whose depth axis
is the band axis. A stack of 3D residual blocks predicts a correction that
is added to the upsampled MS.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import numcore as nc
from .dataio import PatchPair, WeightsFile
from .raster import as_cube, like
from .resample import upsample_bicubic
from .rng import XorShift64Star
from .training import TrainingLog, fit, uniform_fan_in

PREFIX = "fusion."


@dataclass
class FusionConfig:
    channels: int = 16
    blocks: int = 3
    kernel: int = 3
    lr: float = 1e-3
    batch_size: int = 32
    patience: int = 30
    seed: int = 0
    scale: int = 4
    max_epochs: int | None = None
    padding: str = "zero"

    def __post_init__(self):
        if self.channels < 1 or self.blocks < 1:
            raise ValueError("channels and blocks must be >= 1")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class FusionNet:
    def __init__(self, bands: int, cfg: FusionConfig | None = None, params=None):
        self.bands = bands
        self.cfg = cfg or FusionConfig()
        self.params: dict[str, nc.Node] = params if params is not None else self._init()

    def _shapes(self) -> dict[str, tuple[int, ...]]:
        c, k, L = self.cfg.channels, self.cfg.kernel, self.bands
        kk = (k, k, k)
        shapes = {
            "adjust.weight": (L, L + 1, 1, 1),
            "adjust.bias": (L,),
            "lift.weight": (c, 1) + kk,
            "lift.bias": (c,),
        }
        for i in range(self.cfg.blocks):
            for j in (1, 2):
                shapes[f"block{i}.conv{j}.weight"] = (c, c) + kk
                shapes[f"block{i}.conv{j}.bias"] = (c,)
        shapes["proj.weight"] = (1, c) + kk
        shapes["proj.bias"] = (1,)
        return {PREFIX + n: s for n, s in shapes.items()}

    def _init(self) -> dict[str, nc.Node]:
        rng = XorShift64Star(self.cfg.seed)
        params = {}
        for name, shape in self._shapes().items():
            if name.endswith("bias") or name.startswith(PREFIX + "proj."):
                value = np.zeros(shape, dtype=np.float32)
            else:
                value = uniform_fan_in(rng, shape)
            params[name] = nc.parameter(value, name)
        return params

    @property
    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def randomize(self, seed: int, scale: float = 1.0) -> None:
        """Fill every block, including the zero-initialized ones, with random values.

        Weights are drawn from ``U(-b, b)`` and biases from ``U(0, b)`` with
        ``b = scale / sqrt(fan_in)``; positive biases keep most units active.
        """
        rng = XorShift64Star(seed)
        for name, p in self.params.items():
            shape = p.shape
            fan_in = int(np.prod(shape[1:])) if len(shape) > 1 else 1
            bound = scale / np.sqrt(fan_in)
            low = 0.0 if name.endswith("bias") else -bound
            p.value = rng.uniform_array(shape, low, bound).astype(p.dtype)

    def astype(self, dtype) -> "FusionNet":
        params = {k: nc.parameter(p.value.astype(dtype), k) for k, p in self.params.items()}
        return FusionNet(self.bands, self.cfg, params)

    def to_weights(self) -> WeightsFile:
        return WeightsFile({k: p.value.astype(np.float32) for k, p in self.params.items()})

    @classmethod
    def from_weights(cls, weights: WeightsFile, cfg: FusionConfig | None = None) -> "FusionNet":
        if weights.stage != "fusion":
            raise ValueError(f"expected fusion weights, got stage {weights.stage!r}")
        b = weights.blocks
        try:
            bands = b[PREFIX + "adjust.weight"].shape[0]
            lift = b[PREFIX + "lift.weight"].shape
        except KeyError as exc:
            raise ValueError(f"fusion weights missing block {exc}") from None
        n_blocks = sum(1 for k in b if k.endswith(".conv1.weight"))
        inferred = dict(channels=lift[0], blocks=n_blocks, kernel=lift[-1])
        if cfg is None:
            cfg = FusionConfig(**inferred)
        else:
            for key, val in inferred.items():
                if getattr(cfg, key) != val:
                    raise ValueError(f"fusion weights have {key}={val}, config says {getattr(cfg, key)}")
        net = cls(bands, cfg, params={})
        expected = net._shapes()
        if set(expected) != set(b):
            raise ValueError(
                f"fusion weights blocks differ from architecture: {sorted(set(b) ^ set(expected))}"
            )
        for name, shape in expected.items():
            if b[name].shape != shape:
                raise ValueError(f"block {name} has shape {b[name].shape}, expected {shape}")
            net.params[name] = nc.parameter(b[name], name)
        return net

    def residual(self, ms_up, pan) -> nc.Node:
        """Residual prediction for batched ``ms_up [B, L, H, W]`` and ``pan [B, 1, H, W]``."""
        p = self.params
        pre = PREFIX
        pad = self.cfg.padding
        bsz, L, h, w = np.shape(ms_up)
        x = nc.concat_channels([ms_up, pan], axis=1)
        z = nc.conv2d(x, p[pre + "adjust.weight"], p[pre + "adjust.bias"])
        v = nc.reshape(z, (bsz, 1, L, h, w))
        feat = nc.relu(nc.conv3d(v, p[pre + "lift.weight"], p[pre + "lift.bias"], pad))
        for i in range(self.cfg.blocks):
            b = f"{pre}block{i}."
            y = nc.relu(nc.conv3d(feat, p[b + "conv1.weight"], p[b + "conv1.bias"], pad))
            y = nc.conv3d(y, p[b + "conv2.weight"], p[b + "conv2.bias"], pad)
            feat = nc.add(feat, y)
        r = nc.conv3d(feat, p[pre + "proj.weight"], p[pre + "proj.bias"], pad)
        return nc.reshape(r, (bsz, L, h, w))

    def forward(self, ms_up, pan) -> nc.Node:
        """Unclamped ``M' + R`` for batched inputs; the training target."""
        return nc.add(ms_up, self.residual(ms_up, pan))


def _scale_of(ms: np.ndarray, pan: np.ndarray) -> int:
    s = pan.shape[-1] // ms.shape[-1]
    if pan.shape[0] != 1:
        raise ValueError(f"PAN must have one band, got {pan.shape[0]}")
    if s < 2 or pan.shape[1:] != (ms.shape[1] * s, ms.shape[2] * s):
        raise ValueError(
            f"PAN {pan.shape[2]}x{pan.shape[1]} is not an integer multiple >= 2 of "
            f"MS {ms.shape[2]}x{ms.shape[1]}"
        )
    return s


def fusion_forward(net: FusionNet, ms_lr, pan):
    """High-resolution MS estimate ``X' = clamp(M' + R)``, same container type as ``ms_lr``."""
    ms, pn = as_cube(ms_lr), as_cube(pan)
    s = _scale_of(ms, pn)
    if ms.shape[0] != net.bands:
        raise ValueError(f"network expects {net.bands} bands, input has {ms.shape[0]}")
    dtype = next(iter(net.params.values())).dtype
    up = upsample_bicubic(ms.astype(dtype), s)
    out = net.forward(up[None], pn.astype(dtype)[None]).value[0]
    return like(ms_lr, np.clip(out, 0.0, 1.0).astype(np.float32))


@dataclass
class StageResult:
    weights: WeightsFile
    log: TrainingLog
    net: object


def _prepare(pair: PatchPair, s: int):
    ms = np.asarray(pair.ms, np.float32)
    return upsample_bicubic(ms, s), np.asarray(pair.pan, np.float32), np.asarray(pair.gt, np.float32)


def split_items(dataset: Sequence[PatchPair]) -> tuple[list, list]:
    train = [p for p in dataset if p.split == "train"]
    val = [p for p in dataset if p.split == "val"]
    return train, val


def train_fusion(dataset: Sequence[PatchPair], cfg: FusionConfig) -> StageResult:
    """Fit a fresh fusion network on the ``train`` pairs, selecting by ``val`` L1."""
    train, val = split_items(dataset)
    if not train or not val:
        raise ValueError("train_fusion needs pairs tagged 'train' and 'val'")
    s = _scale_of(train[0].ms, train[0].pan)
    if s != cfg.scale:
        raise ValueError(f"patch scale {s} does not match config scale {cfg.scale}")
    net = FusionNet(train[0].ms.shape[0], cfg)
    prep_train = [_prepare(p, s) for p in train]
    prep_val = [_prepare(p, s) for p in val]

    def batch_loss(items):
        up = np.stack([i[0] for i in items])
        pan = np.stack([i[1] for i in items])
        gt = np.stack([i[2] for i in items])
        return nc.l1_loss(net.forward(up, pan), gt)

    history = fit(
        net.params,
        batch_loss,
        prep_train,
        prep_val,
        lr=cfg.lr,
        batch_size=cfg.batch_size,
        patience=cfg.patience,
        seed=cfg.seed,
        max_epochs=cfg.max_epochs,
    )
    return StageResult(net.to_weights(), history, net)
