"""Netpbm image/label files, tiling, and procedural urban/rural scenes."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

CLASS_NAMES = ["ground", "building", "road", "field", "water"]
PALETTE = np.array([
    [128, 160, 96],   # ground
    [200, 60, 50],    # building
    [110, 110, 120],  # road
    [220, 200, 80],   # field
    [40, 90, 200],    # water
], dtype=np.uint8)

MAX_PIXELS = 1 << 28


class ImageFormatError(ValueError):
    pass


class WrongMagicError(ImageFormatError):
    pass


class MalformedHeaderError(ImageFormatError):
    pass


class DimensionOverflowError(ImageFormatError):
    pass


class TruncatedImageError(ImageFormatError):
    pass


@dataclass
class Sample:
    image: np.ndarray  # 3 x H x W float32 in [0, 1]
    label: np.ndarray  # H x W int64
    kind: str = ""
    seed: int = 0

    def __post_init__(self):
        if self.image.shape[-2:] != self.label.shape:
            raise ValueError(f"image {self.image.shape} and label {self.label.shape} differ spatially")


# --------------------------------------------------------------------------
# netpbm
# --------------------------------------------------------------------------

def _parse_header(buf: bytes, magic: bytes, path) -> tuple[int, int, int, int]:
    if len(buf) < 2:
        raise TruncatedImageError(f"{path}: truncated before magic number")
    if buf[:2] != magic:
        raise WrongMagicError(f"{path}: magic {buf[:2]!r}, expected {magic!r}")
    pos = 2
    vals = []
    while len(vals) < 3:
        # whitespace and comments between tokens
        while pos < len(buf) and (buf[pos:pos + 1].isspace() or buf[pos:pos + 1] == b"#"):
            if buf[pos:pos + 1] == b"#":
                end = buf.find(b"\n", pos)
                if end < 0:
                    raise TruncatedImageError(f"{path}: truncated inside header comment")
                pos = end
            pos += 1
        start = pos
        while pos < len(buf) and buf[pos:pos + 1].isdigit():
            pos += 1
        if pos == start:
            if pos >= len(buf):
                raise TruncatedImageError(f"{path}: truncated header")
            raise MalformedHeaderError(f"{path}: unexpected byte {buf[pos:pos + 1]!r} in header")
        if pos - start > 10:
            raise DimensionOverflowError(f"{path}: header value too long")
        vals.append(int(buf[start:pos]))
    if pos >= len(buf):
        raise TruncatedImageError(f"{path}: truncated after header")
    if not buf[pos:pos + 1].isspace():
        raise MalformedHeaderError(f"{path}: header must end in a single whitespace byte")
    w, h, maxval = vals
    if w <= 0 or h <= 0:
        raise MalformedHeaderError(f"{path}: non-positive dimensions {w}x{h}")
    if w * h > MAX_PIXELS:
        raise DimensionOverflowError(f"{path}: {w}x{h} exceeds {MAX_PIXELS} pixels")
    if not 0 < maxval < 256:
        raise MalformedHeaderError(f"{path}: maxval {maxval} is not 8-bit")
    return w, h, maxval, pos + 1


def _read_netpbm(path, magic: bytes, channels: int) -> np.ndarray:
    buf = Path(path).read_bytes()
    w, h, _, off = _parse_header(buf, magic, path)
    n = w * h * channels
    if len(buf) - off < n:
        raise TruncatedImageError(f"{path}: truncated pixel data ({len(buf) - off} of {n} bytes)")
    arr = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off)
    return arr.reshape(h, w, channels) if channels > 1 else arr.reshape(h, w)


def _write_netpbm(path, arr: np.ndarray, magic: bytes) -> None:
    h, w = arr.shape[:2]
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + np.ascontiguousarray(arr).tobytes())


def load_image_u8(path) -> np.ndarray:
    """H x W x 3 uint8."""
    return _read_netpbm(path, b"P6", 3)


def load_image(path) -> np.ndarray:
    """3 x H x W float32 in [0, 1]."""
    return (load_image_u8(path).transpose(2, 0, 1) / 255.0).astype(np.float32)


def to_u8(image: np.ndarray) -> np.ndarray:
    """3 x H x W floats in [0, 1] -> H x W x 3 uint8."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3 and img.shape[0] in (1, 3):
        img = img.transpose(1, 2, 0)
    return np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)


def save_image(path, image: np.ndarray) -> None:
    """Accepts uint8 H x W x 3 as-is, or float 3 x H x W in [0, 1]."""
    arr = np.asarray(image)
    if arr.dtype != np.uint8:
        arr = to_u8(arr)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    _write_netpbm(path, arr, b"P6")


def load_label(path) -> np.ndarray:
    return _read_netpbm(path, b"P5", 1).astype(np.int64)


def save_label(path, label: np.ndarray) -> None:
    lab = np.asarray(label)
    if lab.min(initial=0) < 0 or lab.max(initial=0) > 255:
        raise ValueError("label values must fit in 8 bits")
    _write_netpbm(path, lab.astype(np.uint8), b"P5")


def save_gray(path, values: np.ndarray) -> None:
    """Float H x W in [0, 1] as 8-bit PGM."""
    _write_netpbm(path, np.clip(np.round(np.asarray(values) * 255), 0, 255).astype(np.uint8), b"P5")


def colorize(label: np.ndarray, palette: np.ndarray = PALETTE) -> np.ndarray:
    """H x W labels -> H x W x 3 uint8."""
    lab = np.asarray(label)
    if lab.max(initial=0) >= len(palette):
        raise ValueError(f"label {int(lab.max())} has no palette entry")
    return palette[lab]


# --------------------------------------------------------------------------
# tiling
# --------------------------------------------------------------------------

def tile_origins(n: int, patch: int, stride: int) -> list[int]:
    if patch > n:
        raise ValueError(f"patch {patch} larger than extent {n}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    starts = list(range(0, n - patch + 1, stride))
    if starts[-1] != n - patch:
        starts.append(n - patch)
    return starts


def tile(image: np.ndarray, label: np.ndarray, patch: int, stride: int) -> list[Sample]:
    """Raster-order patches; trailing patches are anchored to the right/bottom edge."""
    h, w = label.shape
    out = []
    for y in tile_origins(h, patch, stride):
        for x in tile_origins(w, patch, stride):
            out.append(Sample(image[:, y:y + patch, x:x + patch].copy(),
                              label[y:y + patch, x:x + patch].copy()))
    return out


# --------------------------------------------------------------------------
# synthetic corpora
# --------------------------------------------------------------------------

@dataclass
class SynthSpec:
    seed: int = 0
    count: int = 64
    size: int = 64
    urban_fraction: float = 0.5
    palette: np.ndarray = field(default_factory=lambda: PALETTE.copy())
    noise: float = 0.03

    def __post_init__(self):
        if not 0.0 <= self.urban_fraction <= 1.0:
            raise ValueError("urban_fraction must be within [0, 1]")
        if self.size < 8:
            raise ValueError("size must be at least 8")


def _colour(rng, palette, k, jitter=0.08) -> np.ndarray:
    base = palette[k].astype(np.float64) / 255.0
    return np.clip(base + rng.uniform(-jitter, jitter, 3), 0, 1)


def _urban(rng: np.random.Generator, s: int) -> np.ndarray:
    label = np.zeros((s, s), dtype=np.int64)
    for _ in range(int(rng.integers(6, 14))):
        bh, bw = rng.integers(max(3, s // 16), max(4, s // 4), size=2)
        y, x = rng.integers(0, s - bh), rng.integers(0, s - bw)
        label[y:y + bh, x:x + bw] = 1
    for _ in range(int(rng.integers(1, 4))):
        width = int(rng.integers(1, 4))
        pos = int(rng.integers(0, s - width))
        if rng.random() < 0.5:
            label[pos:pos + width, :] = 2
        else:
            label[:, pos:pos + width] = 2
    return label


def _blob(rng: np.random.Generator, s: int, sigma: float, frac: float) -> np.ndarray:
    f = ndimage.gaussian_filter(rng.normal(size=(s, s)), sigma, mode="wrap")
    return f > np.quantile(f, 1.0 - frac)


def _rural(rng: np.random.Generator, s: int) -> np.ndarray:
    label = np.zeros((s, s), dtype=np.int64)
    label[_blob(rng, s, s / 8, rng.uniform(0.3, 0.55))] = 3
    label[_blob(rng, s, s / 7, rng.uniform(0.1, 0.25))] = 4
    return label


def render(label: np.ndarray, kind: str, rng: np.random.Generator, palette=PALETTE,
           noise: float = 0.03) -> np.ndarray:
    s = label.shape[0]
    img = np.zeros((3, s, s))
    yy, xx = np.mgrid[0:s, 0:s]
    for k in range(len(palette)):
        m = label == k
        if not m.any():
            continue
        img[:, m] = _colour(rng, palette, k)[:, None]
    if kind == "urban":
        # roof ridges and road markings add fine texture
        stripes = 0.06 * np.sign(np.sin(np.pi * (xx + yy) / 2.0 + rng.uniform(0, np.pi)))
        img += np.where(label == 1, stripes, 0.0)[None]
    else:
        shade = ndimage.gaussian_filter(rng.normal(size=(s, s)), s / 6, mode="wrap")
        img += 0.5 * shade / (np.abs(shade).max() + 1e-9) * 0.08
    img += rng.normal(0.0, noise, img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def synth_sample(kind: str, seed: int, size: int = 64, palette=PALETTE, noise: float = 0.03) -> Sample:
    rng = np.random.default_rng([seed, 0 if kind == "urban" else 1])
    label = _urban(rng, size) if kind == "urban" else _rural(rng, size)
    return Sample(render(label, kind, rng, palette, noise), label, kind, seed)


def sample_seed(spec_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([spec_seed, index]).generate_state(1)[0])


def synth_dataset(spec: SynthSpec) -> list[Sample]:
    out = []
    for i in range(spec.count):
        seed = sample_seed(spec.seed, i)
        kind = "urban" if np.random.default_rng(seed).random() < spec.urban_fraction else "rural"
        out.append(synth_sample(kind, seed, spec.size, spec.palette, spec.noise))
    return out


def synth_kind(kind: str, count: int, seed: int, size: int = 64) -> list[Sample]:
    return [synth_sample(kind, sample_seed(seed, i), size) for i in range(count)]


def write_dataset(root, samples: list[Sample]) -> None:
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "labels").mkdir(parents=True, exist_ok=True)
    lines = []
    for i, smp in enumerate(samples):
        name = f"{i:04d}"
        save_image(root / "images" / f"{name}.ppm", smp.image)
        save_label(root / "labels" / f"{name}.pgm", smp.label)
        lines.append(f"{name} {smp.kind or 'unknown'} {smp.seed}\n")
    (root / "manifest.txt").write_text("".join(lines))


def read_dataset(root) -> list[Sample]:
    root = Path(root)
    manifest = root / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"{manifest} not found")
    out = []
    for line in manifest.read_text().splitlines():
        if not line.strip():
            continue
        parts = line.split()
        name = parts[0]
        kind = parts[1] if len(parts) > 1 else ""
        seed = int(parts[2]) if len(parts) > 2 else 0
        out.append(Sample(load_image(root / "images" / f"{name}.ppm"),
                          load_label(root / "labels" / f"{name}.pgm"), kind, seed))
    return out
