"""Real-valued MLP teacher, ensemble soft targets and the teacher-logits file."""
from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from . import nn
from .dataio import Dataset, iter_batches

log = logging.getLogger(__name__)

LOGITS_MAGIC = b"LDCT"
LOGITS_VERSION = 1
_LOGITS_HEADER = struct.Struct("<4sIII")


class LogitsFormatError(ValueError):
    pass


class TeacherMLP:
    """N -> hidden -> hidden -> K with ReLU activations."""

    def __init__(self, n_features: int, n_classes: int, hidden=(256, 128), seed: int = 0):
        rng = np.random.default_rng(seed)
        sizes = [n_features, *hidden, n_classes]
        self.layers = []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            a = 1.0 / np.sqrt(fan_in)
            self.layers.append((rng.uniform(-a, a, (fan_out, fan_in)), rng.uniform(-a, a, fan_out)))
        self.n_levels = 256

    def parameters(self) -> dict:
        params = {}
        for i, (W, b) in enumerate(self.layers):
            params[f"W{i}"], params[f"b{i}"] = W, b
        return params

    def scale(self, features):
        return np.asarray(features, dtype=np.float64) / (self.n_levels - 1)

    def forward(self, x):
        caches = []
        h = x
        for i, (W, b) in enumerate(self.layers):
            h, c = nn.linear_forward(h, W, b)
            caches.append(c)
            if i < len(self.layers) - 1:
                caches.append(h > 0)
                h = np.maximum(h, 0.0)
        return h, caches

    def backward(self, caches, dz) -> dict:
        grads = {}
        g = dz
        for i in reversed(range(len(self.layers))):
            if i < len(self.layers) - 1:
                g = g * caches[2 * i + 1]
            g, dW, db = nn.linear_backward(caches[2 * i], g)
            grads[f"W{i}"], grads[f"b{i}"] = dW, db
        return grads

    def logits(self, features, batch_size: int = 2000):
        features = np.asarray(features)
        out = []
        for start in range(0, features.shape[0], batch_size):
            z, _ = self.forward(self.scale(features[start:start + batch_size]))
            out.append(z)
        return np.concatenate(out) if out else np.zeros((0, self.layers[-1][0].shape[0]))

    def predict(self, features):
        return np.argmax(self.logits(features), axis=1)


def train_teacher(train: Dataset, hidden=(256, 128), epochs: int = 30, lr: float = 1e-3,
                  batch_size: int = 128, seed: int = 0, test: Dataset | None = None):
    """Fit the MLP with cross-entropy and Adam; returns (model, history)."""
    model = TeacherMLP(train.n_features, train.n_classes, hidden, seed)
    model.n_levels = train.n_levels
    n = len(train)
    steps_per_epoch = len(list(iter_batches(n, batch_size, seed, 0)))
    opt = nn.Adam(model.parameters(), lr0=lr, total_steps=max(1, epochs * steps_per_epoch),
                  clip=np.inf)
    history = []
    for epoch in range(epochs):
        total = 0.0
        for idx in iter_batches(n, batch_size, seed, epoch):
            x = model.scale(train.features[idx])
            z, caches = model.forward(x)
            loss, dz = nn.softmax_ce(z, nn.one_hot(train.labels[idx], train.n_classes))
            if not np.isfinite(loss):
                raise nn.NonFiniteError(f"teacher loss diverged at epoch {epoch}")
            opt.step(model.backward(caches, dz))
            total += float(loss) * len(idx)
        entry = {"epoch": epoch + 1, "train_loss": float(total / n)}
        if test is not None:
            entry["test_accuracy"] = float(np.mean(model.predict(test.features) == test.labels))
        log.info("teacher epoch %d: %s", epoch, entry)
        history.append(entry)
    return model, history


class MLPTeacher(ClassifierMixin, BaseEstimator):
    """Estimator wrapper around :func:`train_teacher` for integer-level inputs."""

    def __init__(self, hidden=(256, 128), epochs=30, lr=1e-3, batch_size=128, n_levels=256,
                 random_state=0):
        self.hidden = hidden
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.n_levels = n_levels
        self.random_state = random_state

    def fit(self, X, y):
        X = np.asarray(X)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        data = Dataset("array", X, encoded, self.n_levels, len(self.classes_))
        self.model_, self.history_ = train_teacher(
            data, tuple(self.hidden), self.epochs, self.lr, self.batch_size, self.random_state)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.logits(X)

    def predict_proba(self, X):
        return nn.softmax(self.decision_function(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]


# --------------------------------------------------------------------------
# soft targets
# --------------------------------------------------------------------------


def ensemble_soft_targets(member_logits):
    """Average of member softmax distributions, shape (samples, K) or (K,)."""
    members = [np.asarray(z, dtype=np.float64) for z in member_logits]
    if not members:
        raise ValueError("empty ensemble")
    shape = members[0].shape
    if any(m.shape != shape for m in members):
        raise ValueError("ensemble members disagree on output shape")
    return np.mean([nn.softmax(m) for m in members], axis=0)


def ensemble_logits(member_logits):
    """Effective logits log(p) of the averaged distribution, for the KD loss."""
    with np.errstate(divide="ignore"):
        logp = np.log(ensemble_soft_targets(member_logits))
    # a zero-probability class must stay finite for the softmax inside the loss
    return np.maximum(logp, np.log(np.finfo(np.float64).tiny))


# --------------------------------------------------------------------------
# logits file: 16-byte header ("LDCT", u32 version, u32 rows, u32 cols),
# then little-endian float32 row-major
# --------------------------------------------------------------------------


@dataclass
class TeacherLogits:
    logits: np.ndarray
    source: str = "trained"

    def __len__(self):
        return self.logits.shape[0]


def export_logits(logits, path) -> None:
    logits = np.asarray(logits, dtype="<f4")
    if logits.ndim != 2:
        raise ValueError("logits must be a (samples, classes) matrix")
    rows, cols = logits.shape
    with open(path, "wb") as fh:
        fh.write(_LOGITS_HEADER.pack(LOGITS_MAGIC, LOGITS_VERSION, rows, cols))
        fh.write(np.ascontiguousarray(logits).tobytes())


def import_logits(path, expected_shape=None) -> TeacherLogits:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    data = path.read_bytes()
    if len(data) < _LOGITS_HEADER.size:
        raise LogitsFormatError("unexpected end of file")
    magic, version, rows, cols = _LOGITS_HEADER.unpack_from(data)
    if magic != LOGITS_MAGIC:
        raise LogitsFormatError(f"bad magic {magic!r}")
    if version != LOGITS_VERSION:
        raise LogitsFormatError(f"unsupported version {version}")
    need = _LOGITS_HEADER.size + 4 * rows * cols
    if len(data) < need:
        raise LogitsFormatError("unexpected end of file")
    if len(data) > need:
        raise LogitsFormatError("trailing bytes after logits payload")
    logits = np.frombuffer(data, dtype="<f4", offset=_LOGITS_HEADER.size).reshape(rows, cols).copy()
    if expected_shape is not None and tuple(expected_shape) != (rows, cols):
        raise LogitsFormatError(f"logits shape {(rows, cols)} does not match expected {tuple(expected_shape)}")
    return TeacherLogits(logits, source="imported")
