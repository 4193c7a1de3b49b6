"""Dataset loading, feature discretization and deterministic batching."""
from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
DATA_DIR_ENV = "LDC_DATA_DIR"


class DatasetError(ValueError):
    """Malformed or inconsistent dataset files."""


@dataclass(frozen=True)
class DatasetInfo:
    n_features: int
    n_classes: int
    n_train: int
    n_test: int
    fmt: str  # "idx" or "text"
    train_files: tuple
    test_files: tuple


_TEXT_DEFAULTS = (("train.csv", "train.txt"), ("test.csv", "test.txt"))

DATASETS = {
    "fashionmnist": DatasetInfo(
        784, 10, 60000, 10000, "idx",
        ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
        ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
    ),
    "isolet": DatasetInfo(617, 26, 6238, 1559, "text",
                          ("isolet1+2+3+4.data",) + _TEXT_DEFAULTS[0],
                          ("isolet5.data",) + _TEXT_DEFAULTS[1]),
    "har": DatasetInfo(561, 6, 7352, 2947, "text", *_TEXT_DEFAULTS),
    "chbmit": DatasetInfo(1472, 2, 13920, 664, "text", *_TEXT_DEFAULTS),
    "creditcard": DatasetInfo(29, 2, 3940, 196, "text", *_TEXT_DEFAULTS),
}


@dataclass
class Dataset:
    name: str
    features: np.ndarray  # (samples, N) integer levels in [0, M-1]
    labels: np.ndarray  # (samples,) in [0, K-1]
    n_levels: int
    n_classes: int
    split: str = "train"

    def __post_init__(self):
        self.features = np.asarray(self.features)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DatasetError("features must be a 2-D matrix")
        if self.features.shape[0] != self.labels.shape[0]:
            raise DatasetError(
                f"{self.features.shape[0]} feature rows but {self.labels.shape[0]} labels")
        if self.features.size and (self.features.min() < 0 or self.features.max() >= self.n_levels):
            raise DatasetError(f"feature levels outside [0, {self.n_levels - 1}]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise DatasetError(f"labels outside [0, {self.n_classes - 1}]")

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.labels.shape[0]

    def subset(self, n: int) -> "Dataset":
        return Dataset(self.name, self.features[:n], self.labels[:n], self.n_levels,
                       self.n_classes, self.split)


# --------------------------------------------------------------------------
# discretization
# --------------------------------------------------------------------------


def _level_dtype(n_levels: int):
    return np.uint8 if n_levels <= 256 else np.int32


def quantize_features(raw, n_levels: int, lo=None, hi=None):
    """Per-feature min-max mapping onto {0, ..., M-1}.

    q = floor((x - min) / (max - min) * (M - 1) + 0.5); constant features map
    to 0.  ``lo``/``hi`` override the per-column range (e.g. statistics from a
    training split); values outside it are clamped.
    """
    if n_levels < 2:
        raise ValueError("need at least 2 levels")
    raw = np.asarray(raw, dtype=np.float64)
    if not np.all(np.isfinite(raw)):
        raise ValueError("non-finite feature values")
    lo = raw.min(axis=0) if lo is None else np.asarray(lo, dtype=np.float64)
    hi = raw.max(axis=0) if hi is None else np.asarray(hi, dtype=np.float64)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    q = np.floor((raw - lo) / safe * (n_levels - 1) + 0.5)
    q = np.where(span > 0, q, 0.0)
    return np.clip(q, 0, n_levels - 1).astype(_level_dtype(n_levels))


class LevelQuantizer(TransformerMixin, BaseEstimator):
    """Learns per-feature ranges on training data and discretizes into levels."""

    def __init__(self, n_levels: int = 256):
        self.n_levels = n_levels

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.data_min_ = X.min(axis=0)
        self.data_max_ = X.max(axis=0)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "data_min_")
        X = check_array(X, dtype=np.float64)
        return quantize_features(X, self.n_levels, self.data_min_, self.data_max_)


# --------------------------------------------------------------------------
# file formats
# --------------------------------------------------------------------------


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def read_idx(path, expected_magic: int):
    """Read an IDX file (optionally gzipped) into a uint8 array."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    with _open(path) as fh:
        head = fh.read(8)
        if len(head) < 8:
            raise DatasetError(f"malformed header in {path}")
        magic, count = struct.unpack(">II", head)
        if magic != expected_magic:
            raise DatasetError(f"malformed header in {path}: magic 0x{magic:08x}")
        ndim = magic & 0xFF
        dims = [count]
        if ndim > 1:
            extra = fh.read(4 * (ndim - 1))
            if len(extra) < 4 * (ndim - 1):
                raise DatasetError(f"malformed header in {path}")
            dims += list(struct.unpack(">" + "I" * (ndim - 1), extra))
        payload = fh.read()
    expected = int(np.prod(dims))
    if len(payload) != expected:
        raise DatasetError(f"{path}: expected {expected} data bytes, found {len(payload)}")
    return np.frombuffer(payload, dtype=np.uint8).reshape(dims)


def read_delimited(path):
    """Numeric text, one sample per row, label in the last column.

    The delimiter is a comma when the first line contains one, else whitespace.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    with open(path) as fh:
        first = fh.readline()
    delimiter = "," if "," in first else None
    try:
        table = np.loadtxt(path, delimiter=delimiter, ndmin=2)
    except ValueError as exc:
        raise DatasetError(f"cannot parse {path}: {exc}") from exc
    labels = table[:, -1]
    if not np.all(labels == np.round(labels)):
        raise DatasetError(f"{path}: non-integer labels in last column")
    return table[:, :-1], labels.astype(np.int64)


def _find(directory: Path, candidates) -> Path:
    for name in candidates:
        for p in (directory / name, directory / (name + ".gz")):
            if p.exists():
                return p
    raise FileNotFoundError(f"file not found: none of {list(candidates)} in {directory}")


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def load_dataset(name: str, root=None, paths=None, n_levels: int = 256):
    """Load the train and test splits of a benchmark.

    ``paths`` may map ``train``/``test`` to explicit files (a pair of
    images/labels files for IDX data).  Otherwise files are looked up in
    ``<root>/<name>/`` with ``root`` defaulting to ``$LDC_DATA_DIR``.
    Split sizes must match the declared benchmark configuration exactly.
    """
    key = name.lower().replace("-", "").replace("_", "")
    if key not in DATASETS:
        raise KeyError(f"unknown dataset {name!r}; choose from {sorted(DATASETS)}")
    info = DATASETS[key]
    directory = Path(root if root is not None else default_data_dir()) / key

    if info.fmt == "idx":
        if paths is None:
            train_files = [_find(directory, [f]) for f in info.train_files]
            test_files = [_find(directory, [f]) for f in info.test_files]
        else:
            train_files, test_files = paths["train"], paths["test"]
        splits = []
        for images_path, labels_path in (train_files, test_files):
            images = read_idx(images_path, IDX_IMAGES_MAGIC)
            labels = read_idx(labels_path, IDX_LABELS_MAGIC).astype(np.int64)
            images = images.reshape(images.shape[0], -1)
            if images.shape[0] != labels.shape[0]:
                raise DatasetError("image and label counts differ")
            splits.append((images, labels))
        (xtr, ytr), (xte, yte) = splits
        # pixels are already discrete: keep them on the fixed 0..255 range
        lo = np.zeros(xtr.shape[1])
        hi = np.full(xtr.shape[1], 255.0)
    else:
        if paths is None:
            train_path = _find(directory, info.train_files)
            test_path = _find(directory, info.test_files)
        else:
            train_path, test_path = paths["train"], paths["test"]
        xtr, ytr = read_delimited(train_path)
        xte, yte = read_delimited(test_path)
        if xte.shape[1] != xtr.shape[1]:
            raise DatasetError("train and test feature counts differ")
        lo, hi = xtr.min(axis=0), xtr.max(axis=0)
        all_labels = np.concatenate([ytr, yte])
        if all_labels.min() >= 1 and all_labels.max() == info.n_classes:
            ytr, yte = ytr - 1, yte - 1

    for split, x, n in (("train", xtr, info.n_train), ("test", xte, info.n_test)):
        if x.shape[0] != n:
            raise DatasetError(f"{key} {split} split has {x.shape[0]} samples, expected {n}")
        if x.shape[1] != info.n_features:
            raise DatasetError(f"{key} has {x.shape[1]} features, expected {info.n_features}")

    train = Dataset(key, quantize_features(xtr, n_levels, lo, hi), ytr, n_levels, info.n_classes, "train")
    test = Dataset(key, quantize_features(xte, n_levels, lo, hi), yte, n_levels, info.n_classes, "test")
    return train, test


# --------------------------------------------------------------------------
# batching
# --------------------------------------------------------------------------


def epoch_permutation(n: int, seed: int, epoch: int):
    """Shuffle order for one epoch from a counter-based generator keyed by (seed, epoch)."""
    rng = np.random.Generator(np.random.Philox(key=[seed, epoch]))
    return rng.permutation(n)


def iter_batches(n: int, batch_size: int, seed: int, epoch: int, shuffle: bool = True):
    """Index arrays for one epoch.  A trailing batch of one joins its predecessor."""
    order = epoch_permutation(n, seed, epoch) if shuffle else np.arange(n)
    starts = list(range(0, n, batch_size))
    if len(starts) > 1 and n - starts[-1] == 1:
        starts.pop()
    for i, start in enumerate(starts):
        stop = starts[i + 1] if i + 1 < len(starts) else n
        yield order[start:stop]
