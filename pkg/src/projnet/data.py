"""Datasets as CSR sparse rows plus labels.

Feature index 0 is reserved: every row carries it with value 1.0, so no
row is empty and the projection always has something to hash. Real
features start at index 1. The dense view for the full-size network
drops that anchor column and shifts everything down by one.
"""

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .errors import (
    DataError,
    IdxCountMismatchError,
    IdxMagicError,
    IdxTruncatedError,
)
from .hashing import hash_text
from .projection import SparseVector

# Fixed so every run carves the identical dev set out of the train set.
DEV_SPLIT_SEED = 1789

MNIST_FILES = {
    "train_images": "train-images-idx3-ubyte.gz",
    "train_labels": "train-labels-idx1-ubyte.gz",
    "test_images": "t10k-images-idx3-ubyte.gz",
    "test_labels": "t10k-labels-idx1-ubyte.gz",
}


class Dataset:
    """CSR rows (indptr/indices/values), one int label per row."""

    def __init__(self, indptr, indices, values, labels, feature_dim: int,
                 num_classes: int, label_names: Optional[List[str]] = None,
                 split: str = ""):
        self.indptr = np.ascontiguousarray(indptr, dtype=np.int64)
        self.indices = np.ascontiguousarray(indices, dtype=np.int64)
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.labels = np.ascontiguousarray(labels, dtype=np.int64)
        self.feature_dim = feature_dim
        self.num_classes = num_classes
        self.label_names = label_names
        self.split = split
        if self.indptr.shape[0] != self.labels.shape[0] + 1:
            raise DataError(
                f"{self.labels.shape[0]} labels but indptr describes "
                f"{self.indptr.shape[0] - 1} rows"
            )
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= num_classes):
            raise DataError(
                f"labels outside [0, {num_classes}): "
                f"saw {self.labels.min()}..{self.labels.max()}"
            )

    def __len__(self):
        return self.labels.shape[0]

    def row(self, r: int) -> Tuple[np.ndarray, np.ndarray]:
        s, e = self.indptr[r], self.indptr[r + 1]
        return self.indices[s:e], self.values[s:e]

    def take(self, rows) -> "Dataset":
        """New dataset holding the given rows, in the given order."""
        rows = np.asarray(rows, dtype=np.int64)
        counts = self.indptr[rows + 1] - self.indptr[rows]
        indptr = np.zeros(rows.size + 1, dtype=np.int64)
        np.cumsum(counts, out=indptr[1:])
        indices = np.empty(indptr[-1], dtype=np.int64)
        values = np.empty(indptr[-1], dtype=np.float64)
        for i, r in enumerate(rows):
            s, e = self.indptr[r], self.indptr[r + 1]
            indices[indptr[i]:indptr[i + 1]] = self.indices[s:e]
            values[indptr[i]:indptr[i + 1]] = self.values[s:e]
        return Dataset(indptr, indices, values, self.labels[rows],
                       self.feature_dim, self.num_classes, self.label_names,
                       self.split)


def dense_inputs(ds: Dataset, rows=None) -> np.ndarray:
    """Dense (B, feature_dim - 1) block for the full-size network.

    Drops the reserved anchor feature 0 and shifts real features down
    one, so column j holds sparse feature j + 1.
    """
    if rows is None:
        rows = np.arange(len(ds))
    rows = np.asarray(rows, dtype=np.int64)
    out = np.zeros((rows.size, ds.feature_dim - 1), dtype=np.float64)
    for i, r in enumerate(rows):
        idx, vals = ds.row(r)
        keep = idx > 0
        out[i, idx[keep] - 1] = vals[keep]
    return out


def _csr_with_anchor(dense_rows: np.ndarray):
    """Dense (N, D) to CSR with the value-1 anchor prepended per row."""
    n, _ = dense_rows.shape
    nz_r, nz_c = np.nonzero(dense_rows)
    pix_counts = np.bincount(nz_r, minlength=n)
    counts = pix_counts + 1
    indptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=indptr[1:])
    indices = np.empty(indptr[-1], dtype=np.int64)
    values = np.empty(indptr[-1], dtype=np.float64)
    indices[indptr[:-1]] = 0
    values[indptr[:-1]] = 1.0
    pix_start = np.zeros(n, dtype=np.int64)
    np.cumsum(pix_counts[:-1], out=pix_start[1:])
    rank = np.arange(nz_r.size, dtype=np.int64) - pix_start[nz_r]
    pos = indptr[nz_r] + 1 + rank
    indices[pos] = nz_c + 1
    values[pos] = dense_rows[nz_r, nz_c]
    return indptr, indices, values


def read_idx(path) -> np.ndarray:
    """Parse one idx file (big-endian, optionally gzipped) to uint8."""
    path = Path(path)
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    if len(raw) < 4:
        raise IdxTruncatedError(f"{path.name}: too short for a magic number")
    magic = int.from_bytes(raw[:4], "big")
    if magic not in (2049, 2051):
        raise IdxMagicError(
            f"{path.name}: magic {magic:#010x} is neither images nor labels"
        )
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path.name}: header cut off")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + int(np.prod(dims))
    if len(raw) != expected:
        raise IdxTruncatedError(
            f"{path.name}: dims {dims} need {expected} bytes, file has {len(raw)}"
        )
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def load_mnist(images_path, labels_path, split: str = "") -> Dataset:
    """One image/label idx file pair to a dataset.

    Pixels land at sparse indices 1..784 scaled to [0, 1]; zeros are
    omitted, so an all-black image keeps only the anchor feature.
    """
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise IdxMagicError(f"{Path(images_path).name}: expected 3-d images")
    if labels.ndim != 1:
        raise IdxMagicError(f"{Path(labels_path).name}: expected 1-d labels")
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"{images.shape[0]} images vs {labels.shape[0]} labels"
        )
    flat = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    indptr, indices, values = _csr_with_anchor(flat)
    return Dataset(indptr, indices, values, labels.astype(np.int64),
                   feature_dim=flat.shape[1] + 1, num_classes=10,
                   label_names=[str(i) for i in range(10)], split=split)


def load_mnist_dir(data_dir) -> Tuple[Dataset, Dataset]:
    """(train, test) from the four standard idx files in data_dir."""
    data_dir = Path(data_dir)
    for name in MNIST_FILES.values():
        if not (data_dir / name).exists():
            raise DataError(
                f"missing {name} in {data_dir}; run `projnet fetch-mnist` "
                "or drop the standard files there"
            )
    train = load_mnist(data_dir / MNIST_FILES["train_images"],
                       data_dir / MNIST_FILES["train_labels"], split="train")
    test = load_mnist(data_dir / MNIST_FILES["test_images"],
                      data_dir / MNIST_FILES["test_labels"], split="test")
    return train, test


def mnist_splits(data_dir, dev_size: int = 5000):
    """(train, dev, test); dev is a fixed-seed slice held out of train."""
    full_train, test = load_mnist_dir(data_dir)
    order = np.random.default_rng(DEV_SPLIT_SEED).permutation(len(full_train))
    dev = full_train.take(np.sort(order[:dev_size]))
    train = full_train.take(np.sort(order[dev_size:]))
    dev.split = "dev"
    return train, dev, test


MIN_HASH_SPACE = 1 << 16


@dataclass(frozen=True)
class FeaturizerConfig:
    """Hashed n-gram featurization knobs; no vocabulary is ever built."""

    ngram_orders: Tuple[int, ...] = (1, 2)
    hash_space: int = 1 << 20
    lowercase: bool = True
    seed: int = 0

    def __post_init__(self):
        if not self.ngram_orders or any(k < 1 for k in self.ngram_orders):
            raise DataError(
                f"ngram orders must be >= 1, got {self.ngram_orders}"
            )
        if self.hash_space < MIN_HASH_SPACE:
            raise DataError(
                f"hash_space must be >= {MIN_HASH_SPACE}, "
                f"got {self.hash_space}"
            )


def _hashed_counts(text: str, config: FeaturizerConfig):
    """(indices, values) of hashed n-gram counts plus the anchor."""
    if config.lowercase:
        text = text.lower()
    tokens = text.split()
    if not tokens:
        raise DataError("no tokens after normalization")
    counts: dict = {}
    for k in config.ngram_orders:
        for i in range(len(tokens) - k + 1):
            gram = "\x1f".join(tokens[i:i + k])
            j = 1 + hash_text(config.seed, gram.encode("utf-8")) \
                % (config.hash_space - 1)
            counts[j] = counts.get(j, 0.0) + 1.0
    items = sorted(counts.items())
    idx = np.fromiter((j for j, _ in items), dtype=np.int64, count=len(items))
    vals = np.fromiter((v for _, v in items), dtype=np.float64,
                       count=len(items))
    return (np.concatenate([[0], idx]).astype(np.int64),
            np.concatenate([[1.0], vals]))


def featurize_text(text: str, config: Optional[FeaturizerConfig] = None):
    """Text to a sparse vector of raw hashed n-gram counts.

    Anchor feature 0 carries 1.0; every n-gram hashes into
    [1, hash_space) and repeats accumulate. Collisions just add.
    """
    config = config or FeaturizerConfig()
    idx, vals = _hashed_counts(text, config)
    return SparseVector(idx, vals)


def load_tsv_corpus(path, config: Optional[FeaturizerConfig] = None) -> Dataset:
    """label<TAB>text lines to a hashed-feature dataset.

    Class ids follow first appearance order in the file; names are kept
    on the dataset.
    """
    path = Path(path)
    config = config or FeaturizerConfig()
    label_ids: dict = {}
    names: List[str] = []
    indptr = [0]
    indices: List[np.ndarray] = []
    values: List[np.ndarray] = []
    labels = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if "\t" not in line:
                raise DataError(f"{path.name}:{lineno}: expected label<TAB>text")
            name, text = line.split("\t", 1)
            try:
                idx, vals = _hashed_counts(text, config)
            except DataError as exc:
                raise DataError(f"{path.name}:{lineno}: {exc}") from None
            if name not in label_ids:
                label_ids[name] = len(names)
                names.append(name)
            indices.append(idx)
            values.append(vals)
            indptr.append(indptr[-1] + idx.size)
            labels.append(label_ids[name])
    if not labels:
        raise DataError(f"{path.name}: no usable lines")
    return Dataset(np.asarray(indptr), np.concatenate(indices),
                   np.concatenate(values), np.asarray(labels),
                   feature_dim=config.hash_space, num_classes=len(names),
                   label_names=names)


def synth_blobs(num_classes: int, dim: int, n: int, seed: int,
                separation: float = 4.0) -> Dataset:
    """Unit-variance Gaussian blobs around seeded unit-norm centers.

    Centers are scaled by separation, so large values give linearly
    separable classes. n counts total examples, dealt round-robin.
    """
    if num_classes < 2 or dim < 1 or n < 0:
        raise DataError(
            f"need num_classes >= 2, dim >= 1, n >= 0; got "
            f"({num_classes}, {dim}, {n})"
        )
    if separation <= 0:
        raise DataError(f"separation must be > 0, got {separation}")
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((num_classes, dim))
    centers *= separation / np.linalg.norm(centers, axis=1, keepdims=True)
    labels = np.arange(n, dtype=np.int64) % num_classes
    points = centers[labels] + rng.standard_normal((n, dim))
    indptr, indices, values = _csr_with_anchor(points)
    return Dataset(indptr, indices, values, labels, feature_dim=dim + 1,
                   num_classes=num_classes,
                   label_names=[f"class{i}" for i in range(num_classes)])


_CIFAR_RECORD = 2 + 32 * 32 * 3


def load_cifar100_bin(path, split: str = "") -> Dataset:
    """CIFAR-100 binary records: coarse byte, fine byte, 3072 pixels.

    Fine labels are kept; pixels scale to [0, 1] at indices 1..3072.
    """
    path = Path(path)
    raw = np.frombuffer(path.read_bytes(), dtype=np.uint8)
    if raw.size == 0 or raw.size % _CIFAR_RECORD:
        raise DataError(
            f"{path.name}: {raw.size} bytes is not a whole number of "
            f"{_CIFAR_RECORD}-byte records"
        )
    recs = raw.reshape(-1, _CIFAR_RECORD)
    labels = recs[:, 1].astype(np.int64)
    flat = recs[:, 2:].astype(np.float64) / 255.0
    indptr, indices, values = _csr_with_anchor(flat)
    return Dataset(indptr, indices, values, labels,
                   feature_dim=flat.shape[1] + 1, num_classes=100,
                   split=split)
