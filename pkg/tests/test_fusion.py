import numpy as np
import pytest

from pansharp import numcore as nc
from pansharp.dataio import PatchPair, extract_patches, split_dataset
from pansharp.fusion import FusionConfig, FusionNet, fusion_forward, train_fusion
from pansharp.raster import RasterVolume
from pansharp.resample import upsample_bicubic, wald_degrade
from pansharp.synthetic import synthetic_scene


def _inputs(bands=8, lr=16, s=4, seed=0):
    rng = np.random.default_rng(seed)
    ms = rng.uniform(0.1, 0.9, size=(bands, lr, lr)).astype(np.float32)
    pan = rng.uniform(0.1, 0.9, size=(1, lr * s, lr * s)).astype(np.float32)
    return ms, pan


def test_fresh_net_is_bicubic():
    ms, pan = _inputs()
    out = fusion_forward(FusionNet(8), ms, pan)
    assert out.shape == (8, 64, 64)
    np.testing.assert_array_equal(out, np.clip(upsample_bicubic(ms, 4), 0, 1))


def test_container_type_kept():
    ms, pan = _inputs(bands=3, lr=4)
    out = fusion_forward(FusionNet(3), RasterVolume(ms), pan)
    assert isinstance(out, RasterVolume) and out.pixels.shape == (3, 16, 16)


def test_randomized_output_clamped_and_deterministic():
    ms, pan = _inputs(bands=3, lr=4)
    net = FusionNet(3, FusionConfig(channels=4, blocks=1))
    net.randomize(1, scale=3.0)
    a = fusion_forward(net, ms, pan)
    assert a.min() >= 0 and a.max() <= 1
    assert not np.array_equal(a, np.clip(upsample_bicubic(ms, 4), 0, 1))
    np.testing.assert_array_equal(a, fusion_forward(net, ms, pan))


def test_input_errors():
    ms, pan = _inputs(bands=3, lr=4)
    net = FusionNet(3)
    with pytest.raises(ValueError, match="multiple"):
        fusion_forward(net, ms, pan[:, :15, :15])
    with pytest.raises(ValueError, match="one band"):
        fusion_forward(net, ms, np.concatenate([pan, pan]))
    with pytest.raises(ValueError, match="bands"):
        fusion_forward(FusionNet(4), ms, pan)


def test_weights_round_trip_and_mismatch():
    net = FusionNet(4, FusionConfig(channels=3, blocks=2))
    net.randomize(5)
    back = FusionNet.from_weights(net.to_weights())
    assert back.cfg.channels == 3 and back.cfg.blocks == 2 and back.bands == 4
    for k in net.params:
        np.testing.assert_array_equal(back.params[k].value, net.params[k].value)
    with pytest.raises(ValueError, match="channels"):
        FusionNet.from_weights(net.to_weights(), FusionConfig(channels=5, blocks=2))
    wf = net.to_weights()
    del wf.blocks["fusion.proj.bias"]
    with pytest.raises(ValueError, match="differ"):
        FusionNet.from_weights(wf)


def test_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(kernel=4)
    with pytest.raises(ValueError):
        FusionConfig(blocks=0)


def _tiny_dataset(n_train=4, n_val=2):
    ms, pan = synthetic_scene(32, 3, seed=4)
    lr, pan, gt = wald_degrade(ms, pan, 4)
    pairs = extract_patches(lr, pan, gt, 4, stride=2)
    tagged = split_dataset(pairs, (n_train, n_val, 0), seed=0)
    return [p for p in tagged if p.split]


def test_patience_zero_runs_one_epoch():
    res = train_fusion(_tiny_dataset(), FusionConfig(channels=2, blocks=1, patience=0, batch_size=2))
    assert len(res.log.rows) == 1


def test_training_deterministic_and_improves():
    cfg = FusionConfig(channels=2, blocks=1, max_epochs=6, patience=10, batch_size=2, lr=3e-3)
    a = train_fusion(_tiny_dataset(), cfg)
    b = train_fusion(_tiny_dataset(), cfg)
    assert a.weights.encode() == b.weights.encode()
    assert a.log.rows == b.log.rows
    assert a.log.best_val <= a.log.rows[0][2]


def test_training_needs_val():
    data = [p for p in _tiny_dataset() if p.split == "train"]
    with pytest.raises(ValueError, match="val"):
        train_fusion(data, FusionConfig(channels=2, blocks=1))


def test_training_scale_mismatch():
    with pytest.raises(ValueError, match="scale"):
        train_fusion(_tiny_dataset(), FusionConfig(channels=2, blocks=1, scale=2))


def test_residual_shape_batched():
    net = FusionNet(5, FusionConfig(channels=2, blocks=1))
    up = np.zeros((2, 5, 8, 8), np.float32)
    pan = np.zeros((2, 1, 8, 8), np.float32)
    assert net.residual(up, pan).shape == (2, 5, 8, 8)
    assert isinstance(net.forward(up, pan), nc.Node)


def test_patch_pair_from_slices_accepted():
    ms, pan = _inputs(bands=2, lr=4)
    pair = PatchPair(ms, pan, np.zeros((2, 16, 16), np.float32), (0, 0), "train")
    assert pair.scale == 4
