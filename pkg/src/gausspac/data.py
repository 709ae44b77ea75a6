"""Datasets: MNIST IDX files, the two-class relabelling, and a toy cluster generator.

Labels are 0-based class indices throughout.
"""
from __future__ import annotations

import gzip
import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import IDXFormatError

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DATASET_VERSION = 1

DEFAULT_TOY_CENTERS = 3.0 * np.eye(4)[:3]
DEFAULT_TOY_SPREADS = (0.5, 0.5, 0.5)


@dataclass(frozen=True)
class Dataset:
    X: np.ndarray
    labels: np.ndarray
    q: int
    name: str = ""

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        labels = np.asarray(self.labels, dtype=np.int64)
        if X.ndim != 2 or X.shape[0] < 1:
            raise ValueError("X must be a non-empty 2-d array")
        if labels.shape != (X.shape[0],):
            raise ValueError("labels must have one entry per row of X")
        if self.q < 2 or labels.min() < 0 or labels.max() >= self.q:
            raise ValueError(f"labels must lie in [0, {self.q})")
        if not np.all(np.isfinite(X)):
            raise ValueError("features must be finite")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "labels", labels)

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def p(self) -> int:
        return self.X.shape[1]

    def subset(self, idx, name: str | None = None) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.labels[idx], self.q, name or f"{self.name}[{len(idx)}]")


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, ndim: int, what: str) -> np.ndarray:
    if len(raw) < 4 + 4 * ndim:
        raise IDXFormatError(f"{what}: file too short for an IDX header")
    got = int.from_bytes(raw[:4], "big")
    if got != magic:
        raise IDXFormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = [int.from_bytes(raw[4 + 4 * i: 8 + 4 * i], "big") for i in range(ndim)]
    offset = 4 + 4 * ndim
    size = int(np.prod(dims))
    if len(raw) - offset != size:
        raise IDXFormatError(f"{what}: expected {size} payload bytes, found {len(raw) - offset}")
    return np.frombuffer(raw, dtype=np.uint8, offset=offset).reshape(dims)


def load_mnist_idx(images_path, labels_path, name: str = "mnist") -> Dataset:
    """Read an IDX image/label pair (optionally gzipped); pixels scaled to [0, 1]."""
    images = _parse_idx(_read_bytes(images_path), IMAGES_MAGIC, 3, "images")
    labels = _parse_idx(_read_bytes(labels_path), LABELS_MAGIC, 1, "labels")
    if images.shape[0] != labels.shape[0]:
        raise IDXFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() > 9:
        raise IDXFormatError("digit labels must lie in 0..9")
    X = images.reshape(images.shape[0], -1).astype(float) / 255.0
    return Dataset(X, labels.astype(np.int64), 10, f"{name}/255")


def write_idx(path, array: np.ndarray, compress: bool | None = None):
    """Write a uint8 array as an IDX file (gzip if the name ends in .gz)."""
    array = np.ascontiguousarray(array, dtype=np.uint8)
    magic = {1: LABELS_MAGIC, 3: IMAGES_MAGIC}.get(array.ndim)
    if magic is None:
        raise ValueError("only 1-d label and 3-d image arrays are supported")
    payload = magic.to_bytes(4, "big") + b"".join(int(d).to_bytes(4, "big") for d in array.shape) + array.tobytes()
    path = Path(path)
    if compress if compress is not None else path.suffix == ".gz":
        payload = gzip.compress(payload, mtime=0)
    path.write_bytes(payload)


def binarize_labels(d: Dataset) -> Dataset:
    """Digits 0-4 become class 0, digits 5-9 class 1."""
    if d.q != 10:
        raise ValueError(f"binarize_labels needs 10 classes, got {d.q}")
    return Dataset(d.X, (d.labels >= 5).astype(np.int64), 2, f"binary-{d.name}")


def make_toy_clusters(m_per_class: int, seed: int = 0, centers=None, spreads=None) -> Dataset:
    """Isotropic Gaussian clusters, each point projected onto the unit sphere."""
    if m_per_class < 1:
        raise ValueError("m_per_class must be >= 1")
    centers = DEFAULT_TOY_CENTERS if centers is None else np.asarray(centers, float)
    spreads = np.asarray(DEFAULT_TOY_SPREADS if spreads is None else spreads, float)
    if centers.ndim != 2 or spreads.shape != (centers.shape[0],):
        raise ValueError("need one spread per center")
    if np.any(np.linalg.norm(centers, axis=1) == 0):
        raise ValueError("centers must be non-zero")
    if np.any(spreads < 0):
        raise ValueError("spreads must be non-negative")
    rng = np.random.default_rng(seed)
    k, dim = centers.shape
    X = np.empty((k * m_per_class, dim))
    for c in range(k):
        block = centers[c] + spreads[c] * rng.standard_normal((m_per_class, dim))
        norms = np.linalg.norm(block, axis=1)
        while np.any(norms == 0):
            bad = norms == 0
            block[bad] = centers[c] + spreads[c] * rng.standard_normal((int(bad.sum()), dim))
            norms = np.linalg.norm(block, axis=1)
        X[c * m_per_class:(c + 1) * m_per_class] = block / norms[:, None]
    labels = np.repeat(np.arange(k), m_per_class)
    return Dataset(X, labels, k, f"toy-{k}x{m_per_class}-seed{seed}")


def save_dataset(path, d: Dataset):
    meta = {"version": DATASET_VERSION, "q": d.q, "name": d.name}
    buf = io.BytesIO()
    np.savez(buf, X=d.X, labels=d.labels, meta=np.frombuffer(json.dumps(meta).encode(), np.uint8))
    Path(path).write_bytes(buf.getvalue())


def load_dataset(path) -> Dataset:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(bytes(z["meta"]).decode())
        if meta.get("version") != DATASET_VERSION:
            raise ValueError(f"unsupported dataset version {meta.get('version')}")
        return Dataset(z["X"], z["labels"], int(meta["q"]), meta["name"])
