"""scikit-learn style front end for LDC training and packed export."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import check_classification_targets
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .dataio import Dataset
from .deploy import pack_model, save_packed
from .trainer import QATConfig, TrainConfig, evaluate, train_ldc


class LDCClassifier(ClassifierMixin, BaseEstimator):
    """Binary VSA classifier trained as a two-layer binary network.

    ``X`` holds integer feature levels in ``[0, n_levels - 1]`` (see
    :class:`ldcvsa.dataio.LevelQuantizer` for real-valued inputs).
    Distillation losses take teacher logits through ``fit(..., teacher_logits=)``.
    """

    def __init__(self, dim=64, value_dim=16, n_levels=256, normalizer="batch", loss="ce",
                 gamma=None, temperature=4.0, label_smoothing=None, epochs=50, batch_size=128,
                 lr=1e-3, clip=1.0, delta=1.0, alpha_multiplier=1.0, qat=True,
                 qat_threshold=0.02, qat_start_epoch=15, random_state=0):
        self.dim = dim
        self.value_dim = value_dim
        self.n_levels = n_levels
        self.normalizer = normalizer
        self.loss = loss
        self.gamma = gamma
        self.temperature = temperature
        self.label_smoothing = label_smoothing
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.clip = clip
        self.delta = delta
        self.alpha_multiplier = alpha_multiplier
        self.qat = qat
        self.qat_threshold = qat_threshold
        self.qat_start_epoch = qat_start_epoch
        self.random_state = random_state

    def _config(self) -> TrainConfig:
        return TrainConfig(
            dim=self.dim, value_dim=self.value_dim, n_levels=self.n_levels,
            batch_size=self.batch_size, epochs=self.epochs, lr0=self.lr, clip=self.clip,
            gamma=self.gamma, temperature=self.temperature, loss_kind=self.loss,
            normalizer=self.normalizer, delta=self.delta, alpha_multiplier=self.alpha_multiplier,
            label_smoothing=self.label_smoothing,
            qat=QATConfig(enabled=self.qat, threshold=self.qat_threshold,
                          start_epoch=self.qat_start_epoch),
            seed=self.random_state)

    def _check_levels(self, X):
        X = check_array(X, dtype=None)
        if not np.issubdtype(X.dtype, np.integer):
            if not np.all(X == np.round(X)):
                raise ValueError("X must contain integer feature levels")
            X = X.astype(np.int64)
        if X.size and (X.min() < 0 or X.max() >= self.n_levels):
            raise ValueError(f"feature levels outside [0, {self.n_levels - 1}]")
        return X

    def fit(self, X, y, teacher_logits=None):
        X, y = check_X_y(X, y, dtype=None)
        check_classification_targets(y)
        X = self._check_levels(X)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        data = Dataset("array", X, encoded, self.n_levels, len(self.classes_))
        self.model_, self.report_ = train_ldc(self._config(), data, teacher=teacher_logits)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "model_")
        return self.model_.decision_function(self._check_levels(X))

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict_proba(self._check_levels(X))

    def predict(self, X):
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def evaluate(self, X, y):
        """Accuracy and mean entropies of correct / wrong predictions."""
        check_is_fitted(self, "model_")
        labels = np.searchsorted(self.classes_, y)
        data = Dataset("array", self._check_levels(X), labels, self.n_levels, len(self.classes_))
        return evaluate(self.model_, data)

    def to_packed(self):
        check_is_fitted(self, "model_")
        return pack_model(self.model_)

    def export(self, path) -> None:
        save_packed(self.to_packed(), path)
