"""Grayscale image I/O, manifests, augmentation transforms and the synthetic dataset."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

CLASSES = ("Cancer", "Pneumonia", "Tuberculosis", "Fibrosis", "Normal")
SPLITS = ("train", "validation", "test")
PAPER_SCALE = {c: (2000, 400, 600) for c in CLASSES}
DESK_SCALE = {c: (50, 10, 15) for c in CLASSES}

_MASK64 = (1 << 64) - 1


# ------------------------------------------------------------------- seeding


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def stable_hash(text: str) -> int:
    """64-bit hash of a string that does not change between processes."""
    return int.from_bytes(hashlib.blake2b(text.encode("utf-8"), digest_size=8).digest(), "little")


def derive_seed(*parts) -> int:
    """Fold ints and strings into one 64-bit seed with splitmix64."""
    state = 0
    for part in parts:
        value = stable_hash(part) if isinstance(part, str) else int(part) & _MASK64
        state = splitmix64(state ^ value)
    return state


# ----------------------------------------------------------------------- PGM


class PGMError(ValueError):
    pass


class PGMMagicError(PGMError):
    pass


class PGMMaxvalError(PGMError):
    pass


class PGMSizeError(PGMError):
    pass


def _pgm_tokens(data: bytes, count: int) -> tuple:
    """Read ``count`` whitespace-separated header tokens, skipping comments."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PGMSizeError("header ends early")
        tokens.append(data[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return tokens, pos + 1


def load_pgm(path) -> np.ndarray:
    """Read a binary P5 file with maxval 255 into a ``[1, H, W]`` array in [0, 1]."""
    data = Path(path).read_bytes()
    if data[:2] != b"P5":
        raise PGMMagicError(f"{path}: not a binary PGM (magic {data[:2]!r})")
    (_, w, h, maxval), offset = _pgm_tokens(data, 4)
    width, height, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise PGMMaxvalError(f"{path}: maxval {maxval} unsupported, need 255")
    raster = data[offset:]
    if len(raster) != width * height:
        raise PGMSizeError(
            f"{path}: raster has {len(raster)} bytes, header says {width}x{height}"
        )
    pixels = np.frombuffer(raster, dtype=np.uint8).reshape(1, height, width)
    return pixels.astype(np.float64) / 255.0


def to_bytes(pixels) -> np.ndarray:
    return np.clip(np.round(np.asarray(pixels, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_pgm(pixels, path) -> None:
    img = to_bytes(pixels)
    img = img.reshape(img.shape[-2:])
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())


def normalize(raw) -> np.ndarray:
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size and (raw.min() < 0 or raw.max() > 255):
        raise ValueError(f"pixel values must lie in [0, 255], got [{raw.min()}, {raw.max()}]")
    return raw / 255.0


# ---------------------------------------------------------------- transforms


def _bilinear(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Sample a 2-D image at float coordinates; outside samples read as zero."""
    h, w = img.shape
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    fy = ys - y0
    fx = xs - x0

    def at(yy, xx):
        inside = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        return np.where(inside, img[np.clip(yy, 0, h - 1), np.clip(xx, 0, w - 1)], 0.0)

    p00, p01 = at(y0, x0), at(y0, x0 + 1)
    p10, p11 = at(y0 + 1, x0), at(y0 + 1, x0 + 1)
    top = p00 + (p01 - p00) * fx
    bottom = p10 + (p11 - p10) * fx
    return top + (bottom - top) * fy


def _each_plane(pixels, fn) -> np.ndarray:
    arr = np.asarray(pixels, dtype=np.float64)
    flat = arr.reshape((-1,) + arr.shape[-2:])
    return np.stack([fn(plane) for plane in flat]).reshape(arr.shape)


def rotate(pixels, degrees: float) -> np.ndarray:
    """Rotate clockwise about the image center with bilinear sampling.

    Multiples of 90 degrees are exact pixel permutations.
    """
    arr = np.asarray(pixels, dtype=np.float64)
    if arr.shape[-1] != arr.shape[-2]:
        raise ValueError(f"rotate needs a square image, got {arr.shape}")
    quarter = degrees / 90.0
    if quarter == round(quarter):
        return np.rot90(arr, -int(round(quarter)) % 4, axes=(-2, -1)).copy()
    n = arr.shape[-1]
    c = (n - 1) / 2.0
    theta = math.radians(degrees)
    cos, sin = math.cos(theta), math.sin(theta)
    rows, cols = np.mgrid[0:n, 0:n].astype(np.float64)
    u, v = cols - c, c - rows
    src_u = cos * u - sin * v
    src_v = sin * u + cos * v
    return _each_plane(arr, lambda p: _bilinear(p, c - src_v, c + src_u))


def zoom(pixels, factor: float) -> np.ndarray:
    """Scale about the center; ``factor > 1`` magnifies, ``< 1`` shrinks with zero fill."""
    if not factor > 0:
        raise ValueError(f"zoom factor must be positive, got {factor}")
    arr = np.asarray(pixels, dtype=np.float64)
    if factor == 1.0:
        return arr.copy()
    h, w = arr.shape[-2:]
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    ys = cy + (rows - cy) / factor
    xs = cx + (cols - cx) / factor
    return _each_plane(arr, lambda p: _bilinear(p, ys, xs))


def adjust_illumination(pixels, gain: float, bias: float) -> np.ndarray:
    if not gain > 0:
        raise ValueError(f"gain must be positive, got {gain}")
    return np.clip(gain * np.asarray(pixels, dtype=np.float64) + bias, 0.0, 1.0)


@dataclass(frozen=True)
class AugmentConfig:
    enabled: bool = True
    rotation_max_degrees: float = 15.0
    zoom_range: tuple = (0.9, 1.1)
    illumination_gain: tuple = (0.8, 1.2)
    illumination_bias: tuple = (-0.05, 0.05)

    def validate(self) -> None:
        if self.rotation_max_degrees < 0:
            raise ValueError("rotation_max_degrees must be >= 0")
        lo, hi = self.zoom_range
        if not (0 < lo <= 1 <= hi):
            raise ValueError(f"zoom_range must satisfy 0 < low <= 1 <= high, got {self.zoom_range}")
        lo, hi = self.illumination_gain
        if not (0 < lo <= hi):
            raise ValueError(f"illumination_gain must be positive and ordered, got {self.illumination_gain}")
        lo, hi = self.illumination_bias
        if lo > hi:
            raise ValueError(f"illumination_bias must be ordered, got {self.illumination_bias}")

    def to_dict(self) -> dict:
        return {
            "enabled": self.enabled,
            "rotation_max_degrees": self.rotation_max_degrees,
            "zoom_range": list(self.zoom_range),
            "illumination_gain": list(self.illumination_gain),
            "illumination_bias": list(self.illumination_bias),
        }


DISABLED = AugmentConfig(enabled=False)


@dataclass(frozen=True)
class ImageSample:
    id: str
    pixels: np.ndarray
    label: str
    split: str

    @property
    def label_index(self) -> int:
        return CLASSES.index(self.label)


@dataclass(frozen=True)
class AugmentDraw:
    angle: float
    zoom: float
    gain: float
    bias: float


def draw_params(sample_id: str, config: AugmentConfig, epoch: int, global_seed: int) -> AugmentDraw:
    rng = np.random.default_rng(derive_seed(global_seed, sample_id, epoch))
    r = config.rotation_max_degrees
    return AugmentDraw(
        angle=float(rng.uniform(-r, r)),
        zoom=float(rng.uniform(*config.zoom_range)),
        gain=float(rng.uniform(*config.illumination_gain)),
        bias=float(rng.uniform(*config.illumination_bias)),
    )


def augment(sample: ImageSample, config: AugmentConfig, epoch: int, global_seed: int) -> ImageSample:
    """Rotate, zoom and relight ``sample`` with draws seeded by (seed, id, epoch)."""
    if not config.enabled:
        return sample
    config.validate()
    d = draw_params(sample.id, config, epoch, global_seed)
    px = rotate(sample.pixels, d.angle)
    px = zoom(px, d.zoom)
    px = adjust_illumination(px, d.gain, d.bias)
    return replace(sample, pixels=px)


# ------------------------------------------------------------------ manifest


class ManifestError(ValueError):
    pass


class UnknownLabelError(ManifestError):
    pass


class UnknownSplitError(ManifestError):
    pass


class DuplicatePathError(ManifestError):
    pass


class MissingImageError(ManifestError):
    pass


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple
    root: Path = Path(".")

    def counts(self) -> dict:
        out = {(c, s): 0 for c in CLASSES for s in SPLITS}
        for e in self.entries:
            out[(e.label, e.split)] += 1
        return out

    def split_totals(self) -> dict:
        totals = {s: 0 for s in SPLITS}
        for e in self.entries:
            totals[e.split] += 1
        return totals

    def __len__(self) -> int:
        return len(self.entries)


def write_manifest(entries, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "label", "split"])
        for e in entries:
            writer.writerow([e.path, e.label, e.split])


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse ``path,label,split`` rows; image paths are relative to the manifest."""
    path = Path(path)
    root = path.parent
    entries = []
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", "label", "split"]:
            raise ManifestError(f"{path}: header must be path,label,split, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            img, label, split = row
            if label not in CLASSES:
                raise UnknownLabelError(f"{path}:{lineno}: unknown label {label!r}")
            if split not in SPLITS:
                raise UnknownSplitError(f"{path}:{lineno}: unknown split {split!r}")
            if img in seen:
                raise DuplicatePathError(f"{path}:{lineno}: duplicate path {img!r}")
            if check_files and not (root / img).is_file():
                raise MissingImageError(f"{path}:{lineno}: image {img!r} not found")
            seen.add(img)
            entries.append(ManifestEntry(img, label, split))
    return DatasetManifest(tuple(entries), root)


def split_view(manifest: DatasetManifest, split: str) -> list:
    if split not in SPLITS:
        raise UnknownSplitError(f"unknown split {split!r}")
    return [
        ImageSample(e.path, load_pgm(manifest.root / e.path), e.label, e.split)
        for e in manifest.entries
        if e.split == split
    ]


# ----------------------------------------------------------------- synthetic


def _blob(rows, cols, cy, cx, radius):
    return np.exp(-((rows - cy) ** 2 + (cols - cx) ** 2) / (2.0 * radius * radius))


def synthetic_image(label: str, side: int, rng: np.random.Generator) -> np.ndarray:
    """One ``[1, side, side]`` image whose texture depends on ``label``.

    Every image is re-centered to a random mean drawn from the same range for
    all classes, so the mean intensity carries no label information.
    """
    s = float(side)
    rows, cols = np.mgrid[0:side, 0:side].astype(np.float64)
    # smooth background: two soft lung fields
    img = 0.25 * (_blob(rows, cols, 0.5 * s, 0.3 * s, 0.22 * s) + _blob(rows, cols, 0.5 * s, 0.7 * s, 0.22 * s))
    if label == "Cancer":
        for _ in range(rng.integers(1, 3)):
            cy, cx = rng.uniform(0.25, 0.75, size=2) * s
            img += rng.uniform(0.5, 0.7) * _blob(rows, cols, cy, cx, rng.uniform(0.07, 0.1) * s)
    elif label == "Pneumonia":
        cy, cx = rng.uniform(0.55, 0.75) * s, rng.choice((0.3, 0.7)) * s
        img += rng.uniform(0.35, 0.45) * _blob(rows, cols, cy, cx, rng.uniform(0.14, 0.18) * s)
    elif label == "Tuberculosis":
        for _ in range(rng.integers(8, 15)):
            cy, cx = rng.uniform(0.1, 0.5) * s, rng.uniform(0.1, 0.9) * s
            img += rng.uniform(0.35, 0.5) * _blob(rows, cols, cy, cx, rng.uniform(0.025, 0.04) * s)
    elif label == "Fibrosis":
        theta = rng.uniform(0, math.pi)
        period = rng.uniform(3.0, 4.5) * s / 32.0
        phase = rng.uniform(0, 2 * math.pi)
        wave = np.sin(2 * math.pi * (rows * math.cos(theta) + cols * math.sin(theta)) / period + phase)
        img += rng.uniform(0.12, 0.18) * wave
    elif label != "Normal":
        raise ValueError(f"unknown label {label!r}")
    img += rng.normal(0.0, 0.04, size=img.shape)
    img += rng.uniform(0.4, 0.5) - img.mean()
    return np.clip(img, 0.0, 1.0)[None]


def generate_synthetic(counts: dict, side: int, global_seed: int, out_dir) -> DatasetManifest:
    """Write PGM images plus ``manifest.csv`` under ``out_dir``.

    ``counts`` maps class name to ``(train, validation, test)``.
    """
    if side < 16:
        raise ValueError(f"side must be >= 16, got {side}")
    unknown = set(counts) - set(CLASSES)
    if unknown:
        raise UnknownLabelError(f"unknown classes {sorted(unknown)}")
    out_dir = Path(out_dir)
    entries = []
    for split_index, split in enumerate(SPLITS):
        for label in CLASSES:
            n = counts.get(label, (0, 0, 0))[split_index]
            if n:
                (out_dir / split / label).mkdir(parents=True, exist_ok=True)
            for i in range(n):
                rel = f"{split}/{label}/{label.lower()}_{i:05d}.pgm"
                rng = np.random.default_rng(derive_seed(global_seed, rel))
                save_pgm(synthetic_image(label, side, rng), out_dir / rel)
                entries.append(ManifestEntry(rel, label, split))
    write_manifest(entries, out_dir / "manifest.csv")
    return DatasetManifest(tuple(entries), out_dir)
