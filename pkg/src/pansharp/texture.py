"""Step 2: per-band texture transfer with PAN as the reference image.

For each band ``n`` the extractor (one set of weights) embeds three images
on the high-resolution grid: the upsampled raw band (queries), PAN that was
down- and up-sampled (keys) and PAN itself (values). Every query patch picks
its most similar key patch by cosine similarity; the matching value patch is
transferred, and the similarity itself gates how much of the transferred
texture is mixed into the backbone features of the Step-1 band.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Sequence

import numpy as np

from . import numcore as nc
from .dataio import PatchPair, WeightsFile
from .fusion import FusionNet, StageResult, fusion_forward, split_items
from .raster import as_cube, like
from .resample import up_down, upsample_bicubic
from .rng import XorShift64Star
from .training import fit, uniform_fan_in

PREFIX = "texture."
ZERO_INIT = ("synth.", "decoder.conv2.")


@dataclass
class TTConfig:
    channels: int = 16
    patch: int = 3
    lr: float = 1e-4
    batch_size: int = 16
    patience: int = 30
    seed: int = 0
    scale: int = 4
    max_epochs: int | None = None

    def __post_init__(self):
        if self.channels < 1:
            raise ValueError("channels must be >= 1")
        if self.patch % 2 == 0:
            raise ValueError("patch size must be odd")

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]


@dataclass
class AttentionResult:
    relevance: np.ndarray  # [N_q, N_k]
    hard: np.ndarray  # [N_q] int
    soft: np.ndarray  # [N_q]
    transferred: np.ndarray  # [C, H, W]


class TextureTransformer:
    def __init__(self, cfg: TTConfig | None = None, params=None):
        self.cfg = cfg or TTConfig()
        self.params: dict[str, nc.Node] = params if params is not None else self._init()

    def _shapes(self) -> dict[str, tuple[int, ...]]:
        c = self.cfg.channels
        shapes = {}
        for net, cin in (("lte", 1), ("backbone", 1)):
            shapes[f"{net}.conv1.weight"] = (c, cin, 3, 3)
            shapes[f"{net}.conv1.bias"] = (c,)
            shapes[f"{net}.conv2.weight"] = (c, c, 3, 3)
            shapes[f"{net}.conv2.bias"] = (c,)
        shapes["synth.weight"] = (c, 2 * c, 3, 3)
        shapes["synth.bias"] = (c,)
        shapes["decoder.conv1.weight"] = (c, c, 3, 3)
        shapes["decoder.conv1.bias"] = (c,)
        shapes["decoder.conv2.weight"] = (1, c, 3, 3)
        shapes["decoder.conv2.bias"] = (1,)
        return {PREFIX + k: v for k, v in shapes.items()}

    def _init(self) -> dict[str, nc.Node]:
        rng = XorShift64Star(self.cfg.seed)
        params = {}
        for name, shape in self._shapes().items():
            short = name[len(PREFIX) :]
            if name.endswith("bias") or short.startswith(ZERO_INIT):
                value = np.zeros(shape, dtype=np.float32)
            else:
                value = uniform_fan_in(rng, shape)
            if short == "lte.conv1.weight":
                # zero-mean first-layer filters: features ignore band offsets
                value = value - value.mean(axis=(1, 2, 3), keepdims=True)
            params[name] = nc.parameter(value, name)
        return params

    @property
    def parameter_count(self) -> int:
        return sum(p.value.size for p in self.params.values())

    def randomize(self, seed: int, scale: float = 1.0) -> None:
        """Random values in every block; biases are drawn non-negative, as for ``FusionNet``."""
        rng = XorShift64Star(seed)
        for name, p in self.params.items():
            fan_in = int(np.prod(p.shape[1:])) if p.value.ndim > 1 else 1
            bound = scale / np.sqrt(fan_in)
            low = 0.0 if name.endswith("bias") else -bound
            p.value = rng.uniform_array(p.shape, low, bound).astype(p.dtype)

    def astype(self, dtype) -> "TextureTransformer":
        params = {k: nc.parameter(p.value.astype(dtype), k) for k, p in self.params.items()}
        return TextureTransformer(self.cfg, params)

    def to_weights(self) -> WeightsFile:
        return WeightsFile({k: p.value.astype(np.float32) for k, p in self.params.items()})

    @classmethod
    def from_weights(cls, weights: WeightsFile, cfg: TTConfig | None = None) -> "TextureTransformer":
        if weights.stage != "texture":
            raise ValueError(f"expected texture weights, got stage {weights.stage!r}")
        try:
            channels = weights.blocks[PREFIX + "lte.conv1.weight"].shape[0]
        except KeyError:
            raise ValueError("texture weights missing the extractor blocks") from None
        if cfg is None:
            cfg = TTConfig(channels=channels)
        elif cfg.channels != channels:
            raise ValueError(f"texture weights have channels={channels}, config says {cfg.channels}")
        tt = cls(cfg, params={})
        expected = tt._shapes()
        if set(expected) != set(weights.blocks):
            raise ValueError(
                f"texture weights blocks differ: {sorted(set(expected) ^ set(weights.blocks))}"
            )
        for name, shape in expected.items():
            if weights.blocks[name].shape != shape:
                raise ValueError(f"block {name} has shape {weights.blocks[name].shape}, expected {shape}")
            tt.params[name] = nc.parameter(weights.blocks[name], name)
        return tt

    # -- sub-networks, all on batched [B, C, H, W] maps

    def _two_conv(self, net: str, x, final_relu: bool) -> nc.Node:
        p = self.params
        pre = f"{PREFIX}{net}."
        y = nc.relu(nc.conv2d(x, p[pre + "conv1.weight"], p[pre + "conv1.bias"], "reflect"))
        y = nc.conv2d(y, p[pre + "conv2.weight"], p[pre + "conv2.bias"], "reflect")
        return nc.relu(y) if final_relu else y

    def extract(self, images) -> nc.Node:
        return self._two_conv("lte", images, final_relu=True)

    def backbone(self, images) -> nc.Node:
        return self._two_conv("backbone", images, final_relu=False)

    def decode(self, features) -> nc.Node:
        return self._two_conv("decoder", features, final_relu=False)

    def synthesize(self, feats, transferred, soft_map) -> nc.Node:
        p = self.params
        mixed = nc.conv2d(
            nc.concat_channels([feats, transferred], axis=-3),
            p[PREFIX + "synth.weight"],
            p[PREFIX + "synth.bias"],
            "reflect",
        )
        return nc.add(feats, nc.mul(mixed, soft_map))

    def forward(self, sr, lr_up, pan, pan_ud):
        """Refine all bands of one scene at once.

        ``sr`` and ``lr_up`` are ``[L, H, W]``, ``pan`` and ``pan_ud`` are
        ``[1, H, W]``. Returns the unclamped refined cube as a node and the
        per-band hard indices and soft values.
        """
        L, h, w = np.shape(sr)
        p = self.cfg.patch
        c = self.cfg.channels
        q = self.extract(np.asarray(lr_up)[:, None])
        k = self.extract(np.asarray(pan_ud)[None])
        v = self.extract(np.asarray(pan)[None])
        n = h * w
        qn = nc.normalize_rows(nc.unfold2d(q, p))
        kn = nc.normalize_rows(nc.reshape(nc.unfold2d(k, p), (n, c * p * p)))
        vp = nc.reshape(nc.unfold2d(v, p), (n, c * p * p))
        soft, hard, _ = nc.rowmax_nt(qn, kn)
        transferred = nc.fold2d(nc.gather_rows(vp, hard), c, h, w, p)
        soft_map = nc.reshape(soft, (L, 1, h, w))
        feats = self.backbone(np.asarray(sr)[:, None])
        fused = self.synthesize(feats, transferred, soft_map)
        residual = nc.reshape(self.decode(fused), (L, h, w))
        return nc.add(sr, residual), hard, soft.value


def _single_band(image, what: str) -> np.ndarray:
    cube = as_cube(image)
    if cube.shape[0] != 1:
        raise ValueError(f"{what} must be a single band, got {cube.shape[0]} bands")
    return cube


def lte_forward(tt: TextureTransformer, image) -> nc.Node:
    """Texture features ``[C, H, W]`` of one single-band image."""
    x = image if isinstance(image, nc.Node) else _single_band(image, "extractor input")
    out = tt.extract(nc.reshape(x, (1, 1) + tuple(x.shape[-2:])))
    return nc.reshape(out, out.shape[1:])


def unfold(features, p: int = 3) -> nc.Node:
    """``[C, H, W]`` features to ``[H*W, C*p*p]`` patches, one centered on each pixel."""
    f = features if isinstance(features, nc.Node) else nc.constant(features)
    c, h, w = f.shape
    out = nc.unfold2d(nc.reshape(f, (1, c, h, w)), p)
    return nc.reshape(out, (h * w, c * p * p))


def fold(patches, channels: int, height: int, width: int, p: int = 3) -> nc.Node:
    pt = patches if isinstance(patches, nc.Node) else nc.constant(patches)
    out = nc.fold2d(nc.reshape(pt, (1,) + tuple(pt.shape)), channels, height, width, p)
    return nc.reshape(out, (channels, height, width))


def relevance(q_patches, k_patches) -> nc.Node:
    """Normalized inner products ``r[i, j]`` between query and key patches."""
    q = q_patches if isinstance(q_patches, nc.Node) else nc.constant(q_patches)
    k = k_patches if isinstance(k_patches, nc.Node) else nc.constant(k_patches)
    if q.shape[-1] != k.shape[-1]:
        raise nc.ShapeError(f"patch dimensionality differs: {q.shape[-1]} vs {k.shape[-1]}")
    return nc.matmul_nt(nc.normalize_rows(q), nc.normalize_rows(k))


def hard_attention(r) -> np.ndarray:
    """Index of the most relevant key for each query (first one on ties)."""
    value = r.value if isinstance(r, nc.Node) else np.asarray(r)
    return np.argmax(value, axis=-1)


def soft_attention(r) -> nc.Node:
    """Best relevance per query; gradient reaches only the selected entry."""
    vals, _ = nc.max_last(r)
    return vals


def transfer(v_patches, h, channels: int, height: int, width: int, p: int = 3) -> nc.Node:
    """Gather value patches at the hard indices and fold them onto the grid."""
    v = v_patches if isinstance(v_patches, nc.Node) else nc.constant(v_patches)
    return fold(nc.gather_rows(v, np.asarray(h)), channels, height, width, p)


def synthesize(tt: TextureTransformer, feats, transferred, soft_map) -> nc.Node:
    """``F + Conv(Concat(F, T)) * S`` on ``[C, H, W]`` features and a ``[1, H, W]`` map."""
    return tt.synthesize(feats, transferred, soft_map)


def attention(tt: TextureTransformer, lr_up_n, pan) -> AttentionResult:
    """Run the matching half of the transformer for one band, unfused, for inspection."""
    lr_up_n = _single_band(lr_up_n, "upsampled band")
    pan = _single_band(pan, "PAN")
    _, h, w = pan.shape
    c, p = tt.cfg.channels, tt.cfg.patch
    q = unfold(lte_forward(tt, lr_up_n), p)
    k = unfold(lte_forward(tt, up_down(pan, tt.cfg.scale)), p)
    v = unfold(lte_forward(tt, pan), p)
    r = relevance(q, k)
    hard = hard_attention(r)
    soft = soft_attention(r)
    t = transfer(v, hard, c, h, w, p)
    return AttentionResult(r.value, hard, soft.value, t.value)


def texture_transfer_band(tt: TextureTransformer, sr_ms_n, lr_ms_n_up, pan) -> np.ndarray:
    """Refined ``[H, W]`` band: Step-1 band plus the decoded texture residual, clamped."""
    sr = _single_band(sr_ms_n, "Step-1 band")
    lr_up = _single_band(lr_ms_n_up, "upsampled band")
    pn = _single_band(pan, "PAN")
    if not sr.shape == lr_up.shape == pn.shape:
        raise ValueError(f"band sizes differ: {sr.shape[1:]}, {lr_up.shape[1:]}, {pn.shape[1:]}")
    dtype = next(iter(tt.params.values())).dtype
    out, _, _ = tt.forward(
        sr.astype(dtype), lr_up.astype(dtype), pn.astype(dtype), up_down(pn, tt.cfg.scale).astype(dtype)
    )
    return np.clip(out.value[0], 0.0, 1.0).astype(np.float32)


def texture_transfer(tt: TextureTransformer, sr_ms, ms_lr, pan):
    """Refine every band of ``sr_ms`` one at a time; returns the container type of ``sr_ms``."""
    sr = as_cube(sr_ms)
    pn = as_cube(pan)
    s = pn.shape[-1] // as_cube(ms_lr).shape[-1]
    if s != tt.cfg.scale:
        raise ValueError(f"input scale {s} does not match texture config scale {tt.cfg.scale}")
    lr_up = upsample_bicubic(as_cube(ms_lr), s)
    bands = [texture_transfer_band(tt, sr[b], lr_up[b], pn) for b in range(sr.shape[0])]
    return like(sr_ms, np.stack(bands))


def _band_l1_sum(pred: nc.Node, gt: np.ndarray) -> nc.Node:
    # sum over bands of per-band mean |error| == L * mean over the cube
    return nc.scalar_mul(nc.l1_loss(pred, gt), gt.shape[0])


def train_texture(dataset: Sequence[PatchPair], fusion_weights: WeightsFile, cfg: TTConfig) -> StageResult:
    """Fit the texture transformer on top of frozen Step-1 outputs."""
    if fusion_weights is None:
        raise ValueError("texture training needs trained fusion weights (train Step 1 first)")
    fusion = FusionNet.from_weights(fusion_weights)
    train, val = split_items(dataset)
    if not train or not val:
        raise ValueError("train_texture needs pairs tagged 'train' and 'val'")
    s = cfg.scale

    def prepare(pair: PatchPair):
        sr = fusion_forward(fusion, pair.ms, pair.pan)
        lr_up = upsample_bicubic(np.asarray(pair.ms, np.float32), s)
        pan = np.asarray(pair.pan, np.float32)
        return sr, lr_up, pan, up_down(pan, s), np.asarray(pair.gt, np.float32)

    prep_train = [prepare(p) for p in train]
    prep_val = [prepare(p) for p in val]
    tt = TextureTransformer(cfg)

    def batch_loss(items):
        total = None
        for sr, lr_up, pan, pan_ud, gt in items:
            out, _, _ = tt.forward(sr, lr_up, pan, pan_ud)
            loss = _band_l1_sum(out, gt)
            total = loss if total is None else nc.add(total, loss)
        return nc.scalar_mul(total, 1.0 / len(items))

    history = fit(
        tt.params,
        batch_loss,
        prep_train,
        prep_val,
        lr=cfg.lr,
        batch_size=cfg.batch_size,
        patience=cfg.patience,
        seed=cfg.seed,
        max_epochs=cfg.max_epochs,
    )
    return StageResult(tt.to_weights(), history, tt)
