"""Binary raster/weights files, PNM export and ingest, patch extraction, splits.

MSRV raster layout (little-endian)::

    b"MSRV" | u8 version=1 | u32 W | u32 H | u32 L | u8 dtype=1 (float32)
    | W*H*L float32, band-sequential, row-major within a band

PSHW weights layout (little-endian)::

    b"PSHW" | u8 version=1 | u32 block count
    | per block: u16 name length | UTF-8 name | u8 rank | rank*u32 dims | float32 data

The pipeline stage of a weights file is the common prefix of its block
names (``fusion.`` or ``texture.``).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .raster import RasterVolume, as_cube
from .rng import XorShift64Star

RASTER_MAGIC = b"MSRV"
WEIGHTS_MAGIC = b"PSHW"
VERSION = 1
DTYPE_F32 = 1
STAGES = ("fusion", "texture")
SPLITS = ("train", "val", "test")


class FormatError(ValueError):
    """A binary file does not follow its declared layout."""


class BadMagicError(FormatError):
    pass


class UnsupportedVersionError(FormatError):
    pass


class UnsupportedDtypeError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class _Reader:
    def __init__(self, data: bytes, what: str):
        self.data = data
        self.pos = 0
        self.what = what

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(
                f"{self.what}: needed {n} bytes at offset {self.pos}, "
                f"only {len(self.data) - self.pos} left"
            )
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _check_header(r: _Reader, magic: bytes) -> None:
    got = r.take(4)
    if got != magic:
        raise BadMagicError(f"{r.what}: expected magic {magic!r}, found {got!r}")
    (version,) = r.unpack("<B")
    if version != VERSION:
        raise UnsupportedVersionError(f"{r.what}: unsupported version {version}")


# ---------------------------------------------------------------- rasters


def encode_raster(volume) -> bytes:
    cube = np.ascontiguousarray(as_cube(volume), dtype="<f4")
    bands, h, w = cube.shape
    header = RASTER_MAGIC + struct.pack("<BIIIB", VERSION, w, h, bands, DTYPE_F32)
    return header + cube.tobytes()


def decode_raster(data: bytes, what: str = "raster") -> RasterVolume:
    r = _Reader(data, what)
    _check_header(r, RASTER_MAGIC)
    w, h, bands, dtype = r.unpack("<IIIB")
    if dtype != DTYPE_F32:
        raise UnsupportedDtypeError(f"{what}: unknown dtype code {dtype}")
    n = w * h * bands
    payload = r.take(4 * n)
    if r.pos != len(data):
        raise FormatError(f"{what}: {len(data) - r.pos} trailing bytes after payload")
    return RasterVolume(np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(bands, h, w))


def write_raster(volume, path) -> None:
    Path(path).write_bytes(encode_raster(volume))


def read_raster(path) -> RasterVolume:
    path = Path(path)
    return decode_raster(path.read_bytes(), str(path))


# ---------------------------------------------------------------- weights


@dataclass
class WeightsFile:
    """Named float32 parameter blocks of one pipeline stage, in file order."""

    blocks: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def stage(self) -> str:
        stages = {name.split(".", 1)[0] for name in self.blocks}
        if len(stages) != 1 or not stages <= set(STAGES):
            raise FormatError(f"weights mix or lack stage prefixes: {sorted(stages)}")
        return stages.pop()

    def encode(self) -> bytes:
        out = [WEIGHTS_MAGIC, struct.pack("<BI", VERSION, len(self.blocks))]
        for name, arr in self.blocks.items():
            raw = name.encode("utf-8")
            arr = np.ascontiguousarray(arr, dtype="<f4")
            out.append(struct.pack("<H", len(raw)) + raw)
            out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
            out.append(arr.tobytes())
        return b"".join(out)

    @classmethod
    def decode(cls, data: bytes, what: str = "weights") -> "WeightsFile":
        r = _Reader(data, what)
        _check_header(r, WEIGHTS_MAGIC)
        (count,) = r.unpack("<I")
        blocks: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = r.unpack("<H")
            name = r.take(nlen).decode("utf-8")
            if name in blocks:
                raise FormatError(f"{what}: duplicate block name {name!r}")
            (rank,) = r.unpack("<B")
            dims = r.unpack(f"<{rank}I")
            n = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32)
            blocks[name] = arr.reshape(dims)
        if r.pos != len(data):
            raise FormatError(f"{what}: {len(data) - r.pos} trailing bytes")
        return cls(blocks)

    def write(self, path) -> None:
        Path(path).write_bytes(self.encode())

    @classmethod
    def read(cls, path) -> "WeightsFile":
        path = Path(path)
        return cls.decode(path.read_bytes(), str(path))


def write_weights(weights: WeightsFile, path) -> None:
    weights.write(path)


def read_weights(path) -> WeightsFile:
    return WeightsFile.read(path)


# ---------------------------------------------------------------- PNM


def _quantize(values: np.ndarray, bits: int) -> np.ndarray:
    top = (1 << bits) - 1
    # round half up
    q = np.floor(np.clip(values.astype(np.float64), 0.0, 1.0) * top + 0.5)
    return q.astype(">u2" if bits == 16 else np.uint8)


def _band_check(volume, bands) -> np.ndarray:
    cube = as_cube(volume)
    for b in bands:
        if not 0 <= b < cube.shape[0]:
            raise IndexError(f"band {b} out of range for {cube.shape[0]} bands")
    return cube


def export_gray(volume, band: int, bitdepth: int, path) -> None:
    """Write one band as a binary PGM (16-bit samples are big-endian)."""
    if bitdepth not in (8, 16):
        raise ValueError("bitdepth must be 8 or 16")
    cube = _band_check(volume, [band])
    _, h, w = cube.shape
    header = f"P5\n{w} {h}\n{(1 << bitdepth) - 1}\n".encode("ascii")
    Path(path).write_bytes(header + _quantize(cube[band], bitdepth).tobytes())


def export_rgb(volume, bands: tuple[int, int, int], path) -> None:
    """Write three bands as an 8-bit binary PPM."""
    cube = _band_check(volume, bands)
    _, h, w = cube.shape
    rgb = np.stack([cube[b] for b in bands], axis=-1)
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    Path(path).write_bytes(header + _quantize(rgb, 8).tobytes())


def read_pnm(path) -> RasterVolume:
    """Ingest a binary PGM (one band) or PPM (three bands), scaled to [0, 1]."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise TruncatedFileError(f"{path}: incomplete PNM header")
        tokens.append(data[start:pos])
    pos += 1
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P5", b"P6"):
        raise BadMagicError(f"{path}: expected P5 or P6, found {magic!r}")
    chans = 1 if magic == b"P5" else 3
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
    n = w * h * chans
    if len(data) - pos < n * dtype.itemsize:
        raise TruncatedFileError(f"{path}: pixel payload truncated")
    px = np.frombuffer(data, dtype=dtype, count=n, offset=pos).astype(np.float64) / maxval
    return RasterVolume.ingest(px.reshape(h, w, chans).transpose(2, 0, 1))


# ---------------------------------------------------------------- patches


@dataclass(frozen=True)
class PatchPair:
    """Co-located MS (low-res), PAN and ground-truth patches.

    ``offset`` is the (row, col) of the MS patch in low-resolution pixels.
    """

    ms: np.ndarray
    pan: np.ndarray
    gt: np.ndarray
    offset: tuple[int, int]
    split: str | None = None

    @property
    def scale(self) -> int:
        return self.pan.shape[-1] // self.ms.shape[-1]


def patch_offsets(
    lr_height: int,
    lr_width: int,
    size: int,
    stride: int | None = None,
    seed: int | None = None,
    count: int | None = None,
) -> list[tuple[int, int]]:
    """Grid offsets when ``stride`` is given, else ``count`` seeded random offsets."""
    if size > lr_height or size > lr_width:
        raise ValueError(f"patch {size}x{size} larger than image {lr_width}x{lr_height}")
    if stride is not None:
        if stride < 1:
            raise ValueError("stride must be >= 1")
        return [
            (y, x)
            for y in range(0, lr_height - size + 1, stride)
            for x in range(0, lr_width - size + 1, stride)
        ]
    if seed is None or count is None:
        raise ValueError("random patch offsets need both seed and count")
    rng = XorShift64Star(seed)
    return [
        (rng.randbelow(lr_height - size + 1), rng.randbelow(lr_width - size + 1))
        for _ in range(count)
    ]


def cut_patches(ms_lr, pan, gt, size: int, offsets) -> list[PatchPair]:
    ms, pn, g = as_cube(ms_lr), as_cube(pan), as_cube(gt)
    s = pn.shape[-1] // ms.shape[-1]
    if pn.shape[0] != 1:
        raise ValueError("PAN must have one band")
    for name, arr in (("pan", pn), ("gt", g)):
        if arr.shape[1:] != (ms.shape[1] * s, ms.shape[2] * s):
            raise ValueError(f"{name} size {arr.shape[1:]} is not {s}x the MS size {ms.shape[1:]}")
    pairs = []
    for y, x in offsets:
        if y + size > ms.shape[1] or x + size > ms.shape[2] or y < 0 or x < 0:
            raise ValueError(f"patch at {(y, x)} does not fit in {ms.shape[1:]}")
        hs = slice(y * s, (y + size) * s)
        ws = slice(x * s, (x + size) * s)
        pairs.append(
            PatchPair(
                ms=ms[:, y : y + size, x : x + size].copy(),
                pan=pn[:, hs, ws].copy(),
                gt=g[:, hs, ws].copy(),
                offset=(int(y), int(x)),
            )
        )
    return pairs


def extract_patches(
    ms_lr,
    pan,
    gt,
    ms_patch_size: int,
    stride: int | None = None,
    seed: int | None = None,
    count: int | None = None,
) -> list[PatchPair]:
    ms = as_cube(ms_lr)
    offsets = patch_offsets(ms.shape[1], ms.shape[2], ms_patch_size, stride, seed, count)
    return cut_patches(ms_lr, pan, gt, ms_patch_size, offsets)


def split_dataset(pairs, counts: tuple[int, int, int], seed: int) -> list:
    """Tag a seeded random selection as train/val/test; the rest stay untagged.

    Returns the pairs in their original order.
    """
    counts = tuple(int(c) for c in counts)
    if len(counts) != 3 or min(counts) < 0:
        raise ValueError(f"counts must be three non-negative integers, got {counts}")
    if sum(counts) > len(pairs):
        raise ValueError(f"requested {sum(counts)} pairs but only {len(pairs)} available")
    order = XorShift64Star(seed).permutation(len(pairs))
    tags: list[str | None] = [None] * len(pairs)
    pos = 0
    for tag, n in zip(SPLITS, counts):
        for i in order[pos : pos + n]:
            tags[i] = tag
        pos += n
    return [replace(p, split=t) if isinstance(p, PatchPair) else (p, t) for p, t in zip(pairs, tags)]


# ---------------------------------------------------------------- manifests


def write_manifest(path, size: int, scale: int, offsets, tags=None) -> None:
    tags = tags or [None] * len(offsets)
    lines = [f"# ms_patch={size} scale={scale}", "index,row,col,split"]
    for i, ((y, x), t) in enumerate(zip(offsets, tags)):
        lines.append(f"{i},{y},{x},{t or '-'}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> tuple[int, int, list[tuple[int, int]], list[str | None]]:
    size = scale = None
    offsets, tags = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            for item in line[1:].split():
                key, _, val = item.partition("=")
                if key == "ms_patch":
                    size = int(val)
                elif key == "scale":
                    scale = int(val)
            continue
        if line.startswith("index"):
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise FormatError(f"{path}:{lineno}: expected index,row,col,split")
        offsets.append((int(parts[1]), int(parts[2])))
        tag = parts[3]
        if tag != "-" and tag not in SPLITS:
            raise FormatError(f"{path}:{lineno}: unknown split tag {tag!r}")
        tags.append(None if tag == "-" else tag)
    if size is None or scale is None:
        raise FormatError(f"{path}: missing '# ms_patch=.. scale=..' header")
    return size, scale, offsets, tags
