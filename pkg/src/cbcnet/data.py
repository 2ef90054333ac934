"""Datasets: the CBC1 container, synthetic gratings, augmentation, and gallery dumps.

CBC1 layout (little-endian)::

    magic    4s   b"CBC1"
    version  u16  1
    count    u32
    channels u8
    height   u16
    width    u16
    classes  u16
    then ``count`` records of: label u16, channels*height*width u8 pixels (C, H, W order)
"""

from __future__ import annotations

import csv
import math
import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DatasetFormatError, ShapeError

MAGIC = b"CBC1"
VERSION = 1
HEADER = struct.Struct("<4sHIBHHH")


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or self.labels.shape != (self.images.shape[0],):
            raise ShapeError(f"images {self.images.shape} and labels {self.labels.shape} disagree")

    def __len__(self):
        return int(self.labels.shape[0])

    @property
    def sample_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)


def split(data: Dataset, val_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded random split into ``(train, val)``."""
    n = len(data)
    n_val = int(round(val_fraction * n))
    if not 0 < n_val < n:
        raise ValueError(f"val_fraction {val_fraction} leaves an empty split of {n} samples")
    order = np.random.default_rng(seed).permutation(n)
    return data.subset(np.sort(order[n_val:])), data.subset(np.sort(order[:n_val]))


# ---------------------------------------------------------------------------
# CBC1 codec


def to_u8(images: np.ndarray) -> np.ndarray:
    return np.round(np.clip(images, 0.0, 1.0) * 255.0).astype(np.uint8)


def encode_dataset(data: Dataset) -> bytes:
    n = len(data)
    c, h, w = data.images.shape[1:]
    for name, value, limit in (("channels", c, 0xFF), ("height", h, 0xFFFF), ("width", w, 0xFFFF),
                               ("classes", data.num_classes, 0xFFFF)):
        if not 1 <= value <= limit:
            raise ShapeError(f"{name}={value} does not fit the CBC1 header")
    if n and (data.labels.min() < 0 or data.labels.max() >= data.num_classes):
        raise ShapeError("labels must lie in [0, num_classes)")
    rec = np.dtype([("label", "<u2"), ("px", "u1", (c * h * w,))])
    body = np.empty(n, dtype=rec)
    body["label"] = data.labels
    body["px"] = to_u8(data.images).reshape(n, c * h * w)
    return HEADER.pack(MAGIC, VERSION, n, c, h, w, data.num_classes) + body.tobytes()


def decode_dataset(buf: bytes) -> Dataset:
    if len(buf) < HEADER.size:
        if buf[:4] != MAGIC[: len(buf[:4])]:
            raise DatasetFormatError("bad_magic", f"expected {MAGIC!r}, found {bytes(buf[:4])!r}")
        raise DatasetFormatError("truncated", f"header needs {HEADER.size} bytes, file has {len(buf)}")
    magic, version, n, c, h, w, k = HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise DatasetFormatError("bad_magic", f"expected {MAGIC!r}, found {magic!r}")
    if version != VERSION:
        raise DatasetFormatError("bad_version", f"unsupported version {version}")
    if min(c, h, w, k) == 0:
        raise DatasetFormatError("bad_header", f"zero dimension in header (c={c}, h={h}, w={w}, classes={k})")
    record = 2 + c * h * w
    expected = HEADER.size + n * record
    if len(buf) < expected:
        raise DatasetFormatError("truncated", f"payload needs {expected - HEADER.size} bytes, has {len(buf) - HEADER.size}")
    if len(buf) > expected:
        raise DatasetFormatError("trailing_data", f"{len(buf) - expected} bytes after the last record")
    if n == 0:
        # valid but empty; skip the record dtype, which cannot describe huge dims
        return Dataset(np.empty((0, c, h, w)), np.empty(0, dtype=np.int64), k)
    rec = np.dtype([("label", "<u2"), ("px", "u1", (c * h * w,))])
    body = np.frombuffer(buf, dtype=rec, count=n, offset=HEADER.size)
    labels = body["label"].astype(np.int64)
    if n and labels.max() >= k:
        bad = int(np.argmax(labels >= k))
        raise DatasetFormatError("label_out_of_range", f"record {bad} has label {labels[bad]} >= {k} classes")
    images = body["px"].reshape(n, c, h, w).astype(np.float64) / 255.0
    return Dataset(images, labels, k)


def save_dataset(data: Dataset, path) -> None:
    Path(path).write_bytes(encode_dataset(data))


def load_dataset(path) -> Dataset:
    """Read a CBC1 file; pixels come back as float64 in [0, 1]."""
    with open(path, "rb") as fh:
        return decode_dataset(fh.read())


# ---------------------------------------------------------------------------
# synthetic gratings


def default_grating_classes(n: int, frequency: float = math.pi / 2) -> list[tuple[float, float]]:
    """``n`` orientations evenly spread over [0, 180) degrees at one frequency."""
    return [(180.0 * k / n, frequency) for k in range(n)]


def _canonical(theta_deg: float, w: float) -> tuple[float, float]:
    # cos is even and the phase is random, so (theta, w) ~ (theta + 180, w) ~ (theta, -w)
    if w < 0:
        w, theta_deg = -w, theta_deg + 180.0
    return round(theta_deg % 180.0, 9), round(w, 12)


def generate_gratings(n_per_class: int, classes, size: int, noise_sigma: float, seed: int) -> Dataset:
    """Oriented cosine gratings with random phase plus Gaussian noise.

    ``image[y, x] = 0.5 + 0.5*cos(w*(x*cos(theta) + y*sin(theta)) + phase) + noise``,
    clipped to [0, 1]; ``classes`` is a list of ``(theta_degrees, w)``.
    """
    classes = [(float(t), float(w)) for t, w in classes]
    if len(classes) < 2:
        raise ConfigError("need at least two grating classes")
    seen = set()
    for t, w in classes:
        if w == 0:
            raise ConfigError(f"class ({t}, {w}) has zero frequency: images are constant")
        key = _canonical(t, w)
        if key in seen:
            raise ConfigError(f"class ({t}, {w}) duplicates another class")
        seen.add(key)
    if n_per_class < 1 or size < 1:
        raise ConfigError("n_per_class and size must be positive")
    rng = np.random.default_rng(seed)
    k = len(classes)
    labels = np.tile(np.arange(k), n_per_class)
    ys, xs = np.mgrid[0:size, 0:size].astype(np.float64)
    images = np.empty((labels.size, 1, size, size))
    for i, lab in enumerate(labels):
        theta, w = classes[lab]
        th = math.radians(theta)
        phase = rng.uniform(0.0, 2 * math.pi)
        img = 0.5 + 0.5 * np.cos(w * (xs * math.cos(th) + ys * math.sin(th)) + phase)
        if noise_sigma > 0:
            img = img + rng.normal(0.0, noise_sigma, size=img.shape)
        images[i, 0] = np.clip(img, 0.0, 1.0)
    return Dataset(images, labels, k)


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentSpec:
    hflip_prob: float = 0.0
    rotation_range: tuple[float, float] = (0.0, 0.0)
    crop: tuple[int, int] | None = None  # (size, padding)

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigError(f"hflip_prob must lie in [0, 1], got {self.hflip_prob}")
        lo, hi = self.rotation_range
        if not (0.0 <= lo <= hi < 360.0):
            raise ConfigError(f"rotation range must satisfy 0 <= min <= max < 360, got {self.rotation_range}")
        if self.crop is not None and (self.crop[0] < 1 or self.crop[1] < 0):
            raise ConfigError(f"invalid crop {self.crop}")


def rotate_bilinear(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate each channel of a (C, H, W) image about its centre; zero fill."""
    if degrees == 0.0:
        return img.copy()
    c, h, w = img.shape
    a = math.radians(degrees)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    # inverse map from output pixel to source position
    sx = math.cos(a) * (xx - cx) + math.sin(a) * (yy - cy) + cx
    sy = -math.sin(a) * (xx - cx) + math.cos(a) * (yy - cy) + cy
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    out = np.zeros_like(img, dtype=np.float64)
    for dy, dx, wgt in ((0, 0, (1 - fy) * (1 - fx)), (0, 1, (1 - fy) * fx), (1, 0, fy * (1 - fx)), (1, 1, fy * fx)):
        yi, xi = y0 + dy, x0 + dx
        ok = (yi >= 0) & (yi < h) & (xi >= 0) & (xi < w)
        vals = np.zeros_like(out)
        vals[:, ok] = img[:, yi[ok], xi[ok]]
        out += vals * wgt
    return out


def hflip(img: np.ndarray) -> np.ndarray:
    return img[:, :, ::-1].copy()


def augment(img: np.ndarray, spec: AugmentSpec, rng: np.random.Generator) -> np.ndarray:
    """Rotate, then pad-and-crop, then maybe flip a single (C, H, W) sample."""
    out = np.asarray(img, dtype=np.float64)
    lo, hi = spec.rotation_range
    if hi > 0.0:
        out = rotate_bilinear(out, float(rng.uniform(lo, hi)))
    if spec.crop is not None:
        size, pad = spec.crop
        c, h, w = out.shape
        if size > h + 2 * pad or size > w + 2 * pad:
            raise ShapeError(f"crop {size} larger than padded image {h + 2 * pad}x{w + 2 * pad}")
        padded = np.pad(out, ((0, 0), (pad, pad), (pad, pad)))
        top = int(rng.integers(0, h + 2 * pad - size + 1))
        left = int(rng.integers(0, w + 2 * pad - size + 1))
        out = padded[:, top : top + size, left : left + size]
    if spec.hflip_prob > 0.0 and rng.random() < spec.hflip_prob:
        out = hflip(out)
    return np.array(out, dtype=np.float64)


# ---------------------------------------------------------------------------
# filter gallery


def to_pgm_bytes(plane: np.ndarray) -> bytes:
    """8-bit binary PGM (P5) of a 2-D array, min-max normalized."""
    plane = np.asarray(plane, dtype=np.float64)
    lo, hi = plane.min(), plane.max()
    if hi > lo:
        px = np.round((plane - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        px = np.full(plane.shape, 128, dtype=np.uint8)
    h, w = plane.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + px.tobytes()


def read_pgm(data: bytes) -> np.ndarray:
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if m is None or int(m.group(3)) != 255:
        raise ValueError("not an 8-bit P5 PGM")
    w, h = int(m.group(1)), int(m.group(2))
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=m.end()).reshape(h, w)


def write_weights_csv(weights: np.ndarray, path) -> None:
    """One row per weight: channel, row, col, value (shortest round-trip floats)."""
    c, h, w = weights.shape
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(["channel", "row", "col", "value"])
        for ci in range(c):
            for yi in range(h):
                for xi in range(w):
                    out.writerow([ci, yi, xi, repr(float(weights[ci, yi, xi]))])
