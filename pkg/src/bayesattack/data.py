"""Datasets: IDX and CSV loaders, seeded synthetic generators, splits."""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numcore import ContractViolation, RngStream


class DataError(Exception):
    code = "data"


class BadMagicError(DataError):
    code = "bad-magic"


class CountMismatchError(DataError):
    code = "count-mismatch"


class TruncatedError(DataError):
    code = "truncated"


class ParseError(DataError):
    code = "parse"


class OutOfRangeError(DataError):
    code = "out-of-range"


@dataclass
class Dataset:
    inputs: np.ndarray  # [n, *input_shape], values in [0, 1]
    labels: np.ndarray  # [n] int64
    classes: int
    split: str = "train"

    def __post_init__(self) -> None:
        self.inputs = np.asarray(self.inputs, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) != len(self.labels):
            raise ContractViolation("inputs and labels differ in length")
        if len(self.labels) < 1:
            raise ContractViolation("a dataset needs at least one example")
        if self.inputs.min() < 0 or self.inputs.max() > 1 or not np.all(np.isfinite(self.inputs)):
            raise ContractViolation("inputs must lie in [0, 1]")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise ContractViolation(f"labels must lie in [0, {self.classes})")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.inputs.shape[1:]

    def subset(self, idx, split: str | None = None) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.inputs[idx], self.labels[idx], self.classes, split or self.split)


# --------------------------------------------------------------------------
# IDX

_IDX_TYPES = {0x08: (">u1", 1), 0x0D: (">f4", 4), 0x0E: (">f8", 8)}


def _read_idx(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_TYPES:
        raise BadMagicError(f"{path}: bad IDX magic {raw[:4].hex()}")
    dtype, size = _IDX_TYPES[raw[2]]
    ndim = raw[3]
    if ndim < 1 or len(raw) < 4 + 4 * ndim:
        raise TruncatedError(f"{path}: truncated IDX header")
    dims = struct.unpack(f">{ndim}I", raw[4:4 + 4 * ndim])
    n = int(np.prod(dims))
    body = raw[4 + 4 * ndim:]
    if len(body) < n * size:
        raise TruncatedError(f"{path}: expected {n * size} data bytes, found {len(body)}")
    arr = np.frombuffer(body[:n * size], dtype=dtype).reshape(dims)
    return arr


def load_idx(images_path, labels_path, classes: int | None = None) -> Dataset:
    """Load an IDX image/label pair.

    Unsigned-byte images are scaled by 1/255; float64 images (as written for
    adversarial batches) are taken as-is. Images gain a channel axis:
    ``[n, 1, h, w]``.
    """
    images = _read_idx(images_path)
    labels = _read_idx(labels_path)
    if labels.ndim != 1 or labels.dtype != np.dtype(">u1"):
        raise BadMagicError(f"{labels_path}: labels must be a 1-d unsigned-byte IDX file (0x00000801)")
    if images.ndim < 2:
        raise BadMagicError(f"{images_path}: images need at least 2 dimensions")
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    x = images.astype(np.float64)
    if images.dtype == np.dtype(">u1"):
        x = x / 255.0
    if x.ndim == 3:
        x = x[:, None, :, :]
    y = labels.astype(np.int64)
    k = classes if classes is not None else int(y.max()) + 1 if len(y) else 2
    if np.any(x < 0) or np.any(x > 1):
        raise OutOfRangeError(f"{images_path}: pixel values outside [0, 1]")
    return Dataset(x, y, max(k, 2), "train")


def save_idx(images_path, labels_path, inputs: np.ndarray, labels: np.ndarray,
             as_bytes: bool = False) -> None:
    """Write an IDX pair; floats by default so adversarial pixels stay exact."""
    x = np.asarray(inputs)
    if x.ndim == 4 and x.shape[1] == 1:
        x = x[:, 0]
    if as_bytes:
        code, payload = 0x08, np.round(x * 255).astype(">u1").tobytes()
    else:
        code, payload = 0x0E, x.astype(">f8").tobytes()
    head = bytes([0, 0, code, x.ndim]) + struct.pack(f">{x.ndim}I", *x.shape)
    Path(images_path).write_bytes(head + payload)
    y = np.asarray(labels, dtype=">u1")
    Path(labels_path).write_bytes(bytes([0, 0, 0x08, 1]) + struct.pack(">I", len(y)) + y.tobytes())


# --------------------------------------------------------------------------
# CSV


def load_csv(path, dim: int, classes: int, header: bool = False) -> Dataset:
    """Rows of ``dim`` floats in [0, 1] followed by an integer label."""
    xs, ys = [], []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        for rowno, row in enumerate(reader, start=1):
            if header and rowno == 1:
                continue
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != dim + 1:
                raise ParseError(f"row {rowno}: expected {dim + 1} columns, found {len(row)}")
            vals = []
            for col, cell in enumerate(row[:dim], start=1):
                try:
                    v = float(cell)
                except ValueError:
                    raise ParseError(f"row {rowno}, column {col}: cannot parse {cell!r}") from None
                if not 0.0 <= v <= 1.0:
                    raise OutOfRangeError(f"row {rowno}, column {col}: value {v} outside [0, 1]")
                vals.append(v)
            try:
                label = int(row[dim])
            except ValueError:
                raise ParseError(f"row {rowno}, column {dim + 1}: bad label {row[dim]!r}") from None
            if not 0 <= label < classes:
                raise OutOfRangeError(f"row {rowno}: label {label} outside [0, {classes})")
            xs.append(vals)
            ys.append(label)
    if not ys:
        raise ParseError(f"{path}: no data rows")
    return Dataset(np.array(xs), np.array(ys), classes)


def save_csv(path, ds: Dataset, header: bool = False) -> None:
    x = ds.inputs.reshape(len(ds), -1)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow([f"x{i}" for i in range(x.shape[1])] + ["label"])
    for row, label in zip(x, ds.labels):
        w.writerow([repr(float(v)) for v in row] + [int(label)])
    Path(path).write_text(buf.getvalue())


# --------------------------------------------------------------------------
# synthetic generators


def _balanced_labels(n: int, classes: int, stream: RngStream) -> np.ndarray:
    y = np.arange(n) % classes
    return y[stream.permutation(n)]


def blob_centroids(dim: int, classes: int, separation: float, stream: RngStream,
                   tries: int = 10_000) -> np.ndarray:
    """Centroids in [0.15, 0.85]^dim with pairwise distance >= ``separation``."""
    for _ in range(tries):
        c = 0.15 + 0.7 * stream.uniform((classes, dim))
        d = np.linalg.norm(c[:, None] - c[None], axis=-1)
        if d[np.triu_indices(classes, 1)].min() >= separation:
            return c
    raise ContractViolation(f"cannot place {classes} centroids {separation} apart in {dim} dims")


def _blobs(n, classes, noise, stream, dim=16, separation=1.0):
    y = _balanced_labels(n, classes, stream)
    centroids = blob_centroids(dim, classes, separation, stream.child("centroids"))
    x = centroids[y] + noise * stream.normal((n, dim))
    return np.clip(x, 0.0, 1.0), y


def _rings(n, classes, noise, stream):
    y = _balanced_labels(n, classes, stream)
    radius = 0.1 + 0.35 * (y + 0.5) / classes
    theta = 2 * np.pi * stream.uniform((n,))
    r = radius + noise * stream.normal((n,))
    x = np.stack([0.5 + r * np.cos(theta), 0.5 + r * np.sin(theta)], axis=1)
    return np.clip(x, 0.0, 1.0), y


BARS_SIDE = 16


def bars_templates(classes: int, side: int = BARS_SIDE) -> list[list[np.ndarray]]:
    """Per class, the list of admissible clean bar images.

    Class ``c`` draws one bar of orientation ``c % 4`` (horizontal, vertical,
    diagonal, anti-diagonal) in one of several positions; classes beyond four
    use double bars.
    """
    out = []
    for c in range(classes):
        orient, width = c % 4, 1 + c // 4
        imgs = []
        for pos in range(2, side - 2 - width + 1, 2):
            img = np.zeros((side, side))
            for k in range(width):
                i = np.arange(side)
                off = pos - side // 2 + k
                if orient == 0:
                    img[pos + k, :] = 1
                elif orient == 1:
                    img[:, pos + k] = 1
                else:
                    j = i + off if orient == 2 else side - 1 - i + off
                    ok = (j >= 0) & (j < side)
                    img[i[ok], j[ok]] = 1
            imgs.append(img)
        out.append(imgs)
    return out


def _bars(n, classes, noise, stream, contrast=(0.35, 0.65), background=(0.2, 0.45)):
    y = _balanced_labels(n, classes, stream)
    templates = bars_templates(classes)
    pick = stream.uniform((n,))
    lo_c, hi_c = contrast
    lo_b, hi_b = background
    amp = lo_c + (hi_c - lo_c) * stream.uniform((n,))
    base = lo_b + (hi_b - lo_b) * stream.uniform((n,))
    x = np.empty((n, BARS_SIDE, BARS_SIDE))
    for i in range(n):
        opts = templates[y[i]]
        x[i] = base[i] + amp[i] * opts[min(int(pick[i] * len(opts)), len(opts) - 1)]
    x += noise * stream.normal(x.shape)
    return np.clip(x, 0.0, 1.0)[:, None], y


def synth_generate(kind: str, n: int, classes: int, noise: float, seed: int, **kw) -> Dataset:
    """Seeded synthetic task: ``blobs`` (16-d vectors), ``rings`` (2-d) or
    ``bars-image`` (1x16x16 images)."""
    if n < classes:
        raise ContractViolation("need at least one example per class")
    if noise < 0:
        raise ContractViolation("noise must be non-negative")
    stream = RngStream(seed, f"synth:{kind}")
    if kind == "blobs":
        x, y = _blobs(n, classes, noise, stream, **kw)
    elif kind == "rings":
        x, y = _rings(n, classes, noise, stream)
    elif kind == "bars-image":
        x, y = _bars(n, classes, noise, stream, **kw)
    else:
        raise ContractViolation(f"unknown synthetic kind {kind!r}")
    return Dataset(x, y, classes, "train")


def split(ds: Dataset, test_fraction: float, stream: RngStream) -> tuple[Dataset, Dataset]:
    """Seeded partition into (train, test); both sides keep at least one example."""
    n = len(ds)
    if n < 2:
        raise ContractViolation("splitting needs at least two examples")
    n_test = min(max(int(round(test_fraction * n)), 1), n - 1)
    order = stream.permutation(n)
    return ds.subset(np.sort(order[n_test:]), "train"), ds.subset(np.sort(order[:n_test]), "test")
