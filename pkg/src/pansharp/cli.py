"""Command-line front end: ``python -m pansharp <command> ...``.

Commands mirror the pipeline order: ``degrade`` builds reduced-resolution
inputs, ``patch`` and ``split`` write a patch manifest, ``train-fusion`` and
``train-texture`` fit the two stages, ``run`` applies them, ``eval`` scores a
prediction and ``selfcheck`` runs the built-in consistency checks.

Exit codes: 0 success, 1 usage error, 2 data error, 3 failed check.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from . import dataio, selfcheck
from . import numcore as nc
from .fusion import FusionConfig, FusionNet, fusion_forward, train_fusion
from .metrics import evaluate
from .raster import RasterVolume
from .resample import wald_degrade
from .texture import TextureTransformer, TTConfig, texture_transfer, train_texture
from .training import TrainingError

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- config


@dataclass
class RunConfig:
    scale: int = 4
    seed: int = 0
    data_dir: str | None = None
    manifest: str | None = None
    fusion: dict = field(default_factory=dict)
    texture: dict = field(default_factory=dict)

    def fusion_config(self) -> FusionConfig:
        values = {"seed": self.seed, "scale": self.scale, **self.fusion}
        return FusionConfig(**values)

    def texture_config(self) -> TTConfig:
        values = {"seed": self.seed, "scale": self.scale, **self.texture}
        return TTConfig(**values)


_TOP_KEYS = {"scale": int, "seed": int, "data_dir": str, "manifest": str}


def _field_types(cls) -> dict[str, type]:
    out = {}
    for f in fields(cls):
        default = getattr(cls(), f.name)
        if f.name == "max_epochs":
            out[f.name] = int
        else:
            out[f.name] = type(default)
    return out


_SECTIONS = {"fusion": _field_types(FusionConfig), "texture": _field_types(TTConfig)}


def _convert(key: str, typ: type, raw: str):
    if key.endswith("max_epochs") and raw.lower() in ("none", ""):
        return None
    try:
        return typ(raw)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {raw!r} as {typ.__name__}") from None


def apply_setting(cfg: RunConfig, key: str, raw: str, where: str = "") -> None:
    key = key.strip()
    raw = raw.strip()
    if key in _TOP_KEYS:
        setattr(cfg, key, _convert(key, _TOP_KEYS[key], raw))
        return
    section, _, name = key.partition(".")
    types = _SECTIONS.get(section)
    if types is None or name not in types:
        raise UsageError(f"{where}unknown config key {key!r}")
    getattr(cfg, section)[name] = _convert(key, types[name], raw)


def parse_config(text: str, source: str = "config") -> RunConfig:
    """``key = value`` lines with ``#`` comments; unknown keys are rejected with their line number."""
    cfg = RunConfig()
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{source}:{lineno}: expected 'key = value', got {line!r}")
        apply_setting(cfg, key, value, where=f"{source}:{lineno}: ")
    return cfg


def load_config(args) -> RunConfig:
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(f"config file not found: {path}")
        cfg = parse_config(path.read_text(), str(path))
    else:
        cfg = RunConfig()
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        apply_setting(cfg, key, value, where="--set: ")
    for key in ("seed", "scale", "data_dir", "manifest"):
        val = getattr(args, key, None)
        if val is not None:
            setattr(cfg, key, val)
    return cfg


# ---------------------------------------------------------------- helpers


def _read(path) -> RasterVolume:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"file not found: {p}")
    return dataio.read_raster(p)


def _load_dataset(cfg: RunConfig) -> list[dataio.PatchPair]:
    if not cfg.data_dir or not cfg.manifest:
        raise UsageError("training needs data_dir and manifest (config keys or --data-dir/--manifest)")
    d = Path(cfg.data_dir)
    ms, pan, gt = (_read(d / n).pixels for n in ("ms_lr.msrv", "pan.msrv", "gt.msrv"))
    size, scale, offsets, tags = dataio.read_manifest(cfg.manifest)
    if scale != cfg.scale:
        raise ValueError(f"manifest scale {scale} differs from configured scale {cfg.scale}")
    pairs = dataio.cut_patches(ms, pan, gt, size, offsets)
    return [replace(p, split=t) for p, t in zip(pairs, tags)]


def _write_log(weights_path: Path, log) -> Path:
    path = weights_path.with_suffix(weights_path.suffix + ".log")
    path.write_text(log.to_text())
    return path


def _bands(text: str) -> tuple[int, int, int]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--preview-bands expects three comma-separated indices, got {text!r}") from None
    if len(vals) != 3:
        raise UsageError(f"--preview-bands expects three indices, got {len(vals)}")
    return vals


# ---------------------------------------------------------------- commands


def cmd_degrade(args) -> int:
    ms, pan = _read(args.ms), _read(args.pan)
    ms_lr, pan_hr, gt = wald_degrade(ms, pan, args.scale)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_raster(ms_lr, out / "ms_lr.msrv")
    dataio.write_raster(pan_hr, out / "pan.msrv")
    dataio.write_raster(gt, out / "gt.msrv")
    print(f"gt {gt.width}x{gt.height}x{gt.bands} -> ms_lr {ms_lr.width}x{ms_lr.height}x{ms_lr.bands}")
    print(f"wrote {out / 'ms_lr.msrv'}, {out / 'pan.msrv'}, {out / 'gt.msrv'}")
    return EXIT_OK


def cmd_patch(args) -> int:
    ms = _read(Path(args.data_dir) / "ms_lr.msrv")
    pan = _read(Path(args.data_dir) / "pan.msrv")
    scale = pan.width // ms.width
    if args.stride is None and args.count is None:
        raise UsageError("patch needs --stride (grid) or --count (seeded random offsets)")
    offsets = dataio.patch_offsets(ms.height, ms.width, args.size, args.stride, args.seed, args.count)
    tags = None
    if args.counts:
        tags = [t for _, t in dataio.split_dataset(offsets, _counts(args.counts), args.seed)]
    dataio.write_manifest(args.out, args.size, scale, offsets, tags)
    print(f"{len(offsets)} patch pairs of {args.size}x{args.size} (scale {scale}) -> {args.out}")
    return EXIT_OK


def _counts(text: str) -> tuple[int, int, int]:
    try:
        vals = tuple(int(v) for v in text.split(","))
    except ValueError:
        raise UsageError(f"--counts expects train,val,test integers, got {text!r}") from None
    if len(vals) != 3:
        raise UsageError(f"--counts expects three integers, got {text!r}")
    return vals


def cmd_split(args) -> int:
    size, scale, offsets, _ = dataio.read_manifest(args.manifest)
    counts = _counts(args.counts)
    tags = [t for _, t in dataio.split_dataset(offsets, counts, args.seed)]
    out = args.out or args.manifest
    dataio.write_manifest(out, size, scale, offsets, tags)
    unused = sum(t is None for t in tags)
    print(f"train {counts[0]}, val {counts[1]}, test {counts[2]}, untagged {unused} -> {out}")
    return EXIT_OK


def cmd_train_fusion(args) -> int:
    cfg = load_config(args)
    dataset = _load_dataset(cfg)
    result = train_fusion(dataset, cfg.fusion_config())
    out = Path(args.out_weights)
    result.weights.write(out)
    log_path = _write_log(out, result.log)
    print(f"{len(result.log.rows)} epochs, best val L1 {result.log.best_val:.6g} at epoch {result.log.best_epoch}")
    print(f"wrote {out} and {log_path}")
    return EXIT_OK


def cmd_train_texture(args) -> int:
    if not args.fusion_weights:
        raise UsageError(
            "train-texture requires --fusion-weights: the fusion stage (train-fusion) "
            "must be trained and frozen before the texture stage"
        )
    fusion_weights = dataio.read_weights(args.fusion_weights)
    if fusion_weights.stage != "fusion":
        raise ValueError(f"{args.fusion_weights} holds {fusion_weights.stage} weights, not fusion weights")
    cfg = load_config(args)
    dataset = _load_dataset(cfg)
    result = train_texture(dataset, fusion_weights, cfg.texture_config())
    out = Path(args.out_weights)
    result.weights.write(out)
    log_path = _write_log(out, result.log)
    print(f"{len(result.log.rows)} epochs, best val L1 {result.log.best_val:.6g} at epoch {result.log.best_epoch}")
    print(f"wrote {out} and {log_path}")
    return EXIT_OK


def cmd_run(args) -> int:
    ms, pan = _read(args.ms_lr), _read(args.pan)
    fusion = FusionNet.from_weights(dataio.read_weights(args.fusion_weights))
    texture = None
    if args.texture_weights:
        wf = dataio.read_weights(args.texture_weights)
        scale = pan.width // ms.width
        texture = TextureTransformer.from_weights(wf)
        texture.cfg = replace(texture.cfg, scale=scale)
    start = time.perf_counter()
    out = fusion_forward(fusion, ms, pan)
    if texture is not None:
        out = texture_transfer(texture, out, ms, pan)
    elapsed = time.perf_counter() - start
    dataio.write_raster(out, args.out)
    stage = "fusion + texture" if texture is not None else "fusion"
    print(f"{stage}: {ms.width}x{ms.height}x{ms.bands} -> {out.width}x{out.height}x{out.bands}")
    print(f"prediction time {elapsed:.3f} s")
    if args.preview_bands:
        preview = Path(args.preview or Path(args.out).with_suffix(".ppm"))
        dataio.export_rgb(out, _bands(args.preview_bands), preview)
        print(f"preview {preview}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred, gt = _read(args.pred), _read(args.gt)
    report = evaluate(pred.pixels, gt.pixels, args.scale, args.time_s)
    text = report.to_text()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    nc.inject_gradient_fault(args.debug_fault)
    try:
        rows = selfcheck.run_all(args.seeds)
    finally:
        nc.inject_gradient_fault(None)
    failures = [r for r in rows if not r[1]]
    for name, ok, detail in rows:
        print(f"{'PASS' if ok else 'FAIL'} {name}" + (f" ({detail})" if detail else ""))
    if failures:
        print(f"{len(failures)} check(s) failed: {', '.join(r[0] for r in failures)}")
        return EXIT_CHECK
    print(f"all {len(rows)} checks passed")
    return EXIT_OK


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _training_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--data-dir", help="directory with ms_lr.msrv, pan.msrv and gt.msrv")
    p.add_argument("--manifest", help="patch manifest with split tags")
    p.add_argument("--seed", type=int)
    p.add_argument("--scale", type=int)
    p.add_argument("--out-weights", required=True)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pansharp", description="Two-stage MS/PAN pansharpening.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("degrade", help="make reduced-resolution training inputs")
    p.add_argument("--ms", required=True)
    p.add_argument("--pan", required=True)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("patch", help="write a patch manifest")
    p.add_argument("--data-dir", required=True)
    p.add_argument("--size", type=int, required=True, help="MS patch size in low-res pixels")
    p.add_argument("--stride", type=int)
    p.add_argument("--count", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--counts", help="also split: train,val,test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_patch)

    p = sub.add_parser("split", help="tag manifest patches as train/val/test")
    p.add_argument("--manifest", required=True)
    p.add_argument("--counts", default="640,192,192")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train-fusion", help="train the fusion stage")
    _training_args(p)
    p.set_defaults(func=cmd_train_fusion)

    p = sub.add_parser("train-texture", help="train the texture stage on frozen fusion weights")
    _training_args(p)
    p.add_argument("--fusion-weights")
    p.set_defaults(func=cmd_train_texture)

    p = sub.add_parser("run", help="pansharpen one scene")
    p.add_argument("--ms-lr", required=True)
    p.add_argument("--pan", required=True)
    p.add_argument("--fusion-weights", required=True)
    p.add_argument("--texture-weights")
    p.add_argument("--out", required=True)
    p.add_argument("--preview-bands", help="r,g,b band indices for a PPM preview")
    p.add_argument("--preview", help="preview path (default: output with .ppm suffix)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="score a prediction against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--time-s", type=float, default=0.0, help="prediction time to record")
    p.add_argument("--out", help="also write the report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("selfcheck", help="gradient, metric and attention checks")
    p.add_argument("--seeds", type=int, default=5)
    p.add_argument("--debug-fault", choices=["relu", "max_last"], help="inject a wrong gradient")
    p.set_defaults(func=cmd_selfcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"pansharp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError, TrainingError, nc.ContractError) as exc:
        # FormatError, MetricError and ShapeError are ValueErrors
        print(f"pansharp: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
