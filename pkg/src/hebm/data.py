"""Synthetic 2D datasets, IDX image loading, and CSV/PGM writers."""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass

import numpy as np

from .nn import RngStream

PINWHEEL_ARMS = 5
PINWHEEL_RATE = 0.9
PINWHEEL_R0 = 0.4
PINWHEEL_R1 = 3.4
RING8_RADIUS = 3.0


class DatasetError(ValueError):
    pass


@dataclass
class DatasetSpec:
    kind: str
    size: int
    noise: float = 0.1
    label_arity: int = 0
    seed: int = 0
    path: str = None  # idx-images / csv only

    def __post_init__(self):
        if self.size <= 0:
            raise DatasetError(f"dataset size must be positive, got {self.size}")


def _balanced_labels(n, modes):
    counts = [n // modes + (1 if m < n % modes else 0) for m in range(modes)]
    return np.repeat(np.arange(modes), counts)


def pinwheel_curve(r, arm):
    """Point on arm ``arm`` at radial parameter r."""
    theta = 2 * np.pi * arm / PINWHEEL_ARMS + PINWHEEL_RATE * r
    return np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)


def gen_synthetic(spec: DatasetSpec):
    """Deterministic toy 2D data in roughly [-4, 4]^2.

    Returns (points (n, 2), labels (n,) or None)."""
    rs = RngStream(spec.seed, ("data", spec.kind))
    n = spec.size
    if spec.kind == "pinwheel":
        labels = _balanced_labels(n, PINWHEEL_ARMS)
        r = rs.child("r").uniform(n, PINWHEEL_R0, PINWHEEL_R1)
        x = pinwheel_curve(r, labels)
        x = x + spec.noise * rs.child("noise").normal((n, 2))
    elif spec.kind == "ring8":
        labels = _balanced_labels(n, 8)
        ang = 2 * np.pi * labels / 8
        centers = RING8_RADIUS * np.stack([np.cos(ang), np.sin(ang)], axis=1)
        x = centers + spec.noise * rs.child("noise").normal((n, 2))
    elif spec.kind == "checkerboard":
        cells = np.array([(i, j) for i in range(4) for j in range(4)
                          if (i + j) % 2 == 0])
        pick = rs.child("cell").integers(0, len(cells), size=n)
        x = (cells[pick] * 2.0 - 4.0
             + rs.child("inner").uniform((n, 2), 0.0, 2.0))
        labels = None
    elif spec.kind == "two-moons":
        labels = _balanced_labels(n, 2)
        th = rs.child("theta").uniform(n, 0.0, np.pi)
        upper = np.stack([np.cos(th), np.sin(th)], axis=1)
        lower = np.stack([1.0 - np.cos(th), 0.5 - np.sin(th)], axis=1)
        x = 2.0 * np.where(labels[:, None] == 0, upper, lower)
        x = x + spec.noise * rs.child("noise").normal((n, 2))
    elif spec.kind == "csv":
        x, labels = read_points_csv(spec.path)
        if x.shape[0] < n:
            raise DatasetError(f"csv has {x.shape[0]} rows, need {n}")
        x, labels = x[:n], None if labels is None else labels[:n]
    elif spec.kind == "idx-images":
        imgs = load_idx(spec.path)
        if imgs.shape[0] < n:
            raise DatasetError(f"idx file has {imgs.shape[0]} images, need {n}")
        x, labels = imgs[:n].reshape(n, -1), None
    else:
        raise DatasetError(f"unknown dataset kind {spec.kind!r}")
    if spec.label_arity and labels is not None:
        labels = labels % spec.label_arity
    return x, labels


# ---------------------------------------------------------------------------
# IDX images


class IdxFormatError(ValueError):
    pass


def load_idx(path) -> np.ndarray:
    """Read an IDX unsigned-byte tensor file; image intensities scaled to
    [0, 1]."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header ({len(raw)} bytes)")
    zero1, zero2, dtype, ndim = raw[0], raw[1], raw[2], raw[3]
    if zero1 != 0 or zero2 != 0 or dtype != 0x08:
        raise IdxFormatError(
            f"{path}: bad magic {raw[:4].hex()} (want 0000 08 nn)")
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims))
    if len(raw) - header != count:
        raise IdxFormatError(
            f"{path}: payload is {len(raw) - header} bytes, expected {count}")
    arr = np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)
    return arr.astype(np.float64) / 255.0


def write_idx(path, images: np.ndarray):
    """Write a uint8 IDX tensor (test fixtures and round trips)."""
    arr = np.ascontiguousarray(np.clip(np.round(images * 255.0), 0, 255)
                               .astype(np.uint8))
    with open(path, "wb") as fh:
        fh.write(bytes([0, 0, 0x08, arr.ndim]))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


# ---------------------------------------------------------------------------
# Writers


def write_points_csv(path, x: np.ndarray, labels=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        header = [f"x{i}" for i in range(x.shape[1])]
        if labels is not None:
            header.append("label")
        w.writerow(header)
        for i in range(x.shape[0]):
            row = [repr(float(v)) for v in x[i]]
            if labels is not None:
                row.append(int(labels[i]))
            w.writerow(row)


def read_points_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        has_label = header and header[-1] == "label"
        xs, ys = [], []
        for row in reader:
            if has_label:
                xs.append([float(v) for v in row[:-1]])
                ys.append(int(row[-1]))
            else:
                xs.append([float(v) for v in row])
    x = np.asarray(xs, dtype=np.float64)
    return x, (np.asarray(ys) if has_label else None)


def write_metrics_csv(path, rows):
    if not rows:
        return
    keys = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(keys)
        for r in rows:
            w.writerow([r.get(k, "") for k in keys])


def write_pgm_grid(path, images: np.ndarray, cols=8):
    """Binary PGM (P5) grid of [0,1] images shaped (n, rows, cols)."""
    n, h, w = images.shape
    cols = min(cols, n)
    rows = (n + cols - 1) // cols
    grid = np.zeros((rows * h, cols * w))
    for i in range(n):
        r, c = divmod(i, cols)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = images[i]
    pix = np.clip(np.round(grid * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{pix.shape[1]} {pix.shape[0]}\n255\n".encode())
        fh.write(pix.tobytes())
