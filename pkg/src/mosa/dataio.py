"""On-disk formats, synthetic dataset generation, and augmentation.

Dataset files ("MOSA", little-endian):

    magic       4 bytes  b"MOSA"
    version     u32      1
    num_samples u32
    channels    u16
    height      u16
    width       u16
    num_classes u16
    per sample: label u16, then C*H*W float32 pixels (C, H, W row-major)

Checkpoint files ("MSCK", little-endian):

    magic       4 bytes  b"MSCK"
    version     u32      1
    config      u32 byte length + UTF-8 "key=value\\n" lines, keys sorted
    tensors     u32 count; each: u32 name length, name UTF-8, u32 rank,
                rank x u32 dims, float64 payload
    masks       u32 count; each: u32 name length, name, u32 rank (= 2),
                2 x u32 dims, packed bitmap (row-major, 8 entries per byte,
                least-significant bit first)
    crc32       u32 over every preceding byte (zlib polynomial)

Both layouts are normative; any compliant tool must interoperate byte for
byte.  Pixels are stored float32 and widened to float64 in memory.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (ConfigError, CorruptionError, DataError, FormatError,
                     TruncatedFileError, VersionError)
from .rng import STREAM_PATTERNS, STREAM_TRAIN_SAMPLES, STREAM_VAL_SAMPLES, Rng

DATASET_MAGIC = b"MOSA"
DATASET_VERSION = 1
_DS_HEADER = struct.Struct("<4sIIHHHH")

CHECKPOINT_MAGIC = b"MSCK"
CHECKPOINT_VERSION = 1


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)


# ---------------------------------------------------------------------------
# dataset file format


def save_dataset(path, ds: Dataset) -> None:
    n, c, h, w = ds.images.shape
    rec = np.dtype([("label", "<u2"), ("pixels", "<f4", (c * h * w,))])
    body = np.empty(n, dtype=rec)
    body["label"] = ds.labels.astype("<u2")
    body["pixels"] = ds.images.reshape(n, -1).astype("<f4")
    header = _DS_HEADER.pack(DATASET_MAGIC, DATASET_VERSION, n, c, h, w, ds.num_classes)
    Path(path).write_bytes(header + body.tobytes())


def load_dataset(path) -> Dataset:
    p = Path(path)
    if not p.exists():
        raise DataError(f"dataset file not found: {path}")
    raw = p.read_bytes()
    if len(raw) < _DS_HEADER.size:
        raise TruncatedFileError(f"{path}: shorter than the dataset header")
    magic, version, n, c, h, w, num_classes = _DS_HEADER.unpack_from(raw)
    if magic != DATASET_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != DATASET_VERSION:
        raise VersionError(f"{path}: unsupported dataset version {version}")
    expect = _DS_HEADER.size + n * (2 + 4 * c * h * w)
    if len(raw) < expect:
        raise TruncatedFileError(f"{path}: {len(raw)} bytes, layout declares {expect}")
    if len(raw) > expect:
        raise FormatError(f"{path}: {len(raw) - expect} trailing bytes")
    rec = np.dtype([("label", "<u2"), ("pixels", "<f4", (c * h * w,))])
    body = np.frombuffer(raw, dtype=rec, offset=_DS_HEADER.size)
    labels = body["label"].astype(np.int64)
    if n and labels.max() >= num_classes:
        raise FormatError(f"{path}: label {labels.max()} >= num_classes {num_classes}")
    images = body["pixels"].astype(np.float64).reshape(n, c, h, w)
    return Dataset(images=images, labels=labels, num_classes=num_classes)


# ---------------------------------------------------------------------------
# checkpoint format


def _config_text(config: dict[str, str]) -> str:
    return "".join(f"{k}={config[k]}\n" for k in sorted(config))


def parse_config_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def save_checkpoint(path, config: dict[str, str],
                    tensors: dict[str, np.ndarray],
                    masks: dict[str, np.ndarray] | None = None) -> None:
    masks = masks or {}
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    blob = _config_text(config).encode("utf-8")
    buf += struct.pack("<I", len(blob)) + blob
    buf += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", arr.ndim)
        buf += struct.pack(f"<{arr.ndim}I", *arr.shape)
        buf += arr.tobytes()
    buf += struct.pack("<I", len(masks))
    for name in sorted(masks):
        m = np.asarray(masks[name])
        if m.ndim != 2:
            raise ConfigError(f"mask {name!r} must be 2-D, got shape {m.shape}")
        nb = name.encode("utf-8")
        buf += struct.pack("<I", len(nb)) + nb
        buf += struct.pack("<I", 2)
        buf += struct.pack("<2I", *m.shape)
        buf += np.packbits(m.reshape(-1).astype(np.uint8), bitorder="little").tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))


class _Cursor:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.off = 0
        self.path = path

    def read(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise TruncatedFileError(f"{self.path}: record extends past end of file")
        out = self.raw[self.off:self.off + n]
        self.off += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.read(4))[0]


def load_checkpoint(path) -> tuple[dict[str, str], dict[str, np.ndarray], dict[str, np.ndarray]]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"checkpoint file not found: {path}")
    raw = p.read_bytes()
    cur = _Cursor(raw, path)
    if cur.read(4) != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic")
    version = cur.u32()
    if version != CHECKPOINT_VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    config = parse_config_text(cur.read(cur.u32()).decode("utf-8"))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(cur.u32()):
        name = cur.read(cur.u32()).decode("utf-8")
        rank = cur.u32()
        dims = struct.unpack(f"<{rank}I", cur.read(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        payload = cur.read(8 * count)
        tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
    masks: dict[str, np.ndarray] = {}
    for _ in range(cur.u32()):
        name = cur.read(cur.u32()).decode("utf-8")
        rank = cur.u32()
        if rank != 2:
            raise FormatError(f"{path}: mask {name!r} has rank {rank}, expected 2")
        rows, cols = struct.unpack("<2I", cur.read(8))
        packed = cur.read((rows * cols + 7) // 8)
        bits = np.unpackbits(np.frombuffer(packed, dtype=np.uint8),
                             bitorder="little")[:rows * cols]
        masks[name] = bits.astype(np.float64).reshape(rows, cols)
    stored_crc = cur.u32()
    if cur.off != len(raw):
        raise FormatError(f"{path}: {len(raw) - cur.off} trailing bytes")
    if stored_crc != (zlib.crc32(raw[:-4]) & 0xFFFFFFFF):
        raise CorruptionError(f"{path}: CRC mismatch")
    return config, tensors, masks


# ---------------------------------------------------------------------------
# synthetic data


def _class_pattern(rng: Rng, channels: int, height: int, width: int) -> np.ndarray:
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    theta = rng.uniform() * 2.0 * np.pi
    freq = 1.0 + 3.0 * rng.uniform()
    phase = rng.uniform() * 2.0 * np.pi
    base = np.sin(2.0 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    for _ in range(2):
        cx = 0.15 + 0.7 * rng.uniform()
        cy = 0.15 + 0.7 * rng.uniform()
        rad = 0.1 + 0.2 * rng.uniform()
        amp = (0.8 + 0.7 * rng.uniform()) * (1.0 if rng.uniform() < 0.5 else -1.0)
        base = base + amp * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2) / (2.0 * rad * rad))
    weights = np.asarray(rng.uniform((channels,))) * 1.4 - 0.7
    pattern = weights[:, None, None] * base[None, :, :]
    return (pattern - pattern.mean()) / (pattern.std() + 1e-12)


# Corruption strengths per unit of difficulty; difficulty 0 renders clean,
# perfectly separable patterns.  Sign flips are what separate nonlinear
# feature learning from a linear probe on frozen features.
NOISE_PER_DIFFICULTY = 0.35
FLIP_PER_DIFFICULTY = 0.05
SHIFT_CAP = 1.0


def _render_sample(pattern: np.ndarray, rng: Rng, difficulty: float) -> np.ndarray:
    img = pattern
    max_shift = int(round(min(SHIFT_CAP, difficulty)))
    if max_shift > 0:
        dy = rng.randint(2 * max_shift + 1) - max_shift
        dx = rng.randint(2 * max_shift + 1) - max_shift
        img = np.roll(img, (dy, dx), axis=(1, 2))
    flip_p = min(0.5, FLIP_PER_DIFFICULTY * difficulty)
    if flip_p > 0.0 and rng.uniform() < flip_p:
        img = -img
    if difficulty > 0.0:
        img = img + np.asarray(rng.normal(img.shape)) * (NOISE_PER_DIFFICULTY * difficulty)
    return img


def gen_synthetic(classes: int = 10, train_per_class: int = 200, val_per_class: int = 50,
                  channels: int = 3, height: int = 16, width: int = 16,
                  difficulty: float = 1.0, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Procedural texture-plus-blob classes with difficulty-scaled corruption.

    Difficulty 0 renders every sample identical to its class pattern (linearly
    separable by construction).  Raising it adds pixel noise, small circular
    shifts, and a growing chance of a global sign flip, which suppresses
    linear separability while leaving class structure learnable.  Train and
    val samples come from disjoint seeded streams.  Pixels are quantized to
    float32 so in-memory data matches a file round trip exactly.
    """
    if classes < 2:
        raise ConfigError("gen_synthetic needs at least 2 classes")
    root = Rng(seed)
    pattern_rng = root.split(STREAM_PATTERNS)
    patterns = [_class_pattern(pattern_rng.split(c), channels, height, width)
                for c in range(classes)]

    def render_split(per_class: int, rng: Rng) -> Dataset:
        images = np.empty((classes * per_class, channels, height, width))
        labels = np.empty(classes * per_class, dtype=np.int64)
        i = 0
        for c in range(classes):
            for _ in range(per_class):
                images[i] = _render_sample(patterns[c], rng, difficulty)
                labels[i] = c
                i += 1
        images = images.astype(np.float32).astype(np.float64)
        return Dataset(images=images, labels=labels, num_classes=classes)

    train = render_split(train_per_class, root.split(STREAM_TRAIN_SAMPLES))
    val = render_split(val_per_class, root.split(STREAM_VAL_SAMPLES))
    return train, val


# ---------------------------------------------------------------------------
# augmentation


def _resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    c, h, w = img.shape
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0.0, h - 1.0)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0.0, w - 1.0)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[None, :, None]
    wx = (xs - x0)[None, None, :]
    rows0 = img[:, y0, :]
    rows1 = img[:, y1, :]
    top = rows0[:, :, x0] * (1 - wx) + rows0[:, :, x1] * wx
    bot = rows1[:, :, x0] * (1 - wx) + rows1[:, :, x1] * wx
    return top * (1 - wy) + bot * wy


def augment_batch(images: np.ndarray, rng: Rng, min_scale: float = 0.7,
                  allow_flip: bool = False) -> np.ndarray:
    """Seeded random crop-with-resize (and optional horizontal flip).

    Flips default off: synthetic classes carry oriented textures, so mirroring
    can destroy class identity.
    """
    out = np.empty_like(images)
    _, _, h, w = images.shape
    for i, img in enumerate(images):
        side_h = max(1, round(h * (min_scale + (1.0 - min_scale) * rng.uniform())))
        side_w = max(1, round(w * (min_scale + (1.0 - min_scale) * rng.uniform())))
        top = rng.randint(h - side_h + 1)
        left = rng.randint(w - side_w + 1)
        crop = img[:, top:top + side_h, left:left + side_w]
        crop = _resize_bilinear(crop, h, w)
        if allow_flip and rng.uniform() < 0.5:
            crop = crop[:, :, ::-1]
        out[i] = crop
    return out
