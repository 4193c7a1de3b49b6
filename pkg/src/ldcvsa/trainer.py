"""LDC training loop, evaluation metrics and gradient snapshots."""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .core import LDCModel, NORMALIZERS, argmax_label
from .dataio import Dataset, iter_batches
from .qat import OscillationState, apply_freezing, update_oscillation

log = logging.getLogger(__name__)

LOSS_KINDS = ("ce", "kd_kl", "kd_js", "hard_label_teacher")


class ConfigError(ValueError):
    pass


@dataclass
class QATConfig:
    enabled: bool = True
    momentum: float = 0.01
    threshold: float = 0.02
    start_epoch: int = 15


@dataclass
class TrainConfig:
    dim: int = 64
    value_dim: int = 16
    n_levels: int = 256
    batch_size: int = 128
    epochs: int = 50
    lr0: float = 1e-3
    clip: float = 1.0
    gamma: float | None = None  # None: 1 for CE-type losses, 0 with a teacher
    temperature: float = 4.0
    loss_kind: str = "ce"
    normalizer: str = "batch"
    delta: float = 1.0
    alpha_multiplier: float = 1.0
    latent_clip: float | None = 1.0
    label_smoothing: float | None = None  # f in f*t + (1-f)/K; None disables
    qat: QATConfig = field(default_factory=QATConfig)
    seed: int = 0

    def validate(self) -> None:
        if self.dim <= 0 or self.value_dim <= 0 or self.dim % self.value_dim:
            raise ConfigError(f"dim {self.dim} must be a positive multiple of value_dim {self.value_dim}")
        if self.gamma is not None and not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if not self.temperature > 0:
            raise ConfigError("temperature must be positive")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}")
        if self.normalizer not in NORMALIZERS:
            raise ConfigError(f"normalizer must be one of {NORMALIZERS}")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be at least 2")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.label_smoothing is not None and not 0.0 <= self.label_smoothing <= 1.0:
            raise ConfigError("label_smoothing must lie in [0, 1]")
        if not self.delta > 0:
            raise ConfigError("delta must be positive")

    @property
    def uses_teacher(self) -> bool:
        return self.loss_kind != "ce"

    def effective_gamma(self) -> float:
        if self.gamma is not None:
            return self.gamma
        return 0.0 if self.loss_kind in ("kd_kl", "kd_js") else 1.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        d["qat"] = QATConfig(**d.get("qat", {}))
        return cls(**d)


@dataclass
class EvalResult:
    accuracy: float
    entropy_correct: float | None  # mean entropy over correct predictions; None if none
    entropy_wrong: float | None
    per_class: list  # [correct, total] per class

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunReport:
    config: dict
    epochs: list = field(default_factory=list)
    final: dict | None = None
    snapshots: list = field(default_factory=list)

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps({"config": self.config, "final": self.final,
                                          "epochs": self.epochs}, indent=2, sort_keys=True))

    def to_csv(self, path) -> None:
        if not self.epochs:
            Path(path).write_text("")
            return
        keys = list(self.epochs[0])
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
            w.writeheader()
            for row in self.epochs:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})


# --------------------------------------------------------------------------
# losses
# --------------------------------------------------------------------------


def mixed_loss(cfg: TrainConfig, z, labels, teacher_logits=None):
    """gamma * CE + (1 - gamma) * distillation, per the configured loss kind."""
    K = z.shape[1]
    if cfg.loss_kind == "hard_label_teacher":
        target = nn.one_hot(argmax_label(teacher_logits), K)
    else:
        target = nn.one_hot(labels, K)
    if cfg.label_smoothing is not None:
        target = nn.label_smooth(target, cfg.label_smoothing, K)
    if cfg.loss_kind in ("ce", "hard_label_teacher"):
        return nn.softmax_ce(z, target)
    gamma = cfg.effective_gamma()
    kd = nn.kd_kl_loss if cfg.loss_kind == "kd_kl" else nn.js_loss
    if gamma == 1.0:
        return nn.softmax_ce(z, target)
    loss_kd, dz_kd = kd(z, teacher_logits, cfg.temperature)
    if gamma == 0.0:
        return loss_kd, dz_kd
    loss_ce, dz_ce = nn.softmax_ce(z, target)
    return gamma * loss_ce + (1 - gamma) * loss_kd, gamma * dz_ce + (1 - gamma) * dz_kd


# --------------------------------------------------------------------------
# evaluation
# --------------------------------------------------------------------------


def evaluate(model, data: Dataset) -> EvalResult:
    z = model.decision_function(data.features)
    pred = argmax_label(z)
    correct = pred == data.labels
    ent = nn.entropy(nn.softmax(z))
    per_class = [[int(correct[data.labels == k].sum()), int((data.labels == k).sum())]
                 for k in range(data.n_classes)]
    return EvalResult(
        accuracy=float(correct.mean()) if len(correct) else 0.0,
        entropy_correct=float(ent[correct].mean()) if correct.any() else None,
        entropy_wrong=float(ent[~correct].mean()) if (~correct).any() else None,
        per_class=per_class,
    )


def held_variance(model: LDCModel, X) -> float:
    """Mean per-dimension variance of the sign input on a held batch (train-mode statistics)."""
    _, cache = model.forward(X, train=True, update_stats=False)
    return float(cache["pre"].var(axis=0).mean())


# --------------------------------------------------------------------------
# gradient snapshots
# --------------------------------------------------------------------------


def gradient_snapshot(model: LDCModel, x, label: int, bins: int = 50, teacher_logit=None,
                      cfg: TrainConfig | None = None) -> dict:
    """Histograms of the sign input, dL/dF^r and F^r for one sample.

    A single sample has no batch statistics, so normalizers run with their
    running statistics; the normalizer then acts as a fixed per-dimension
    affine map in backward.
    """
    cfg = cfg or TrainConfig(loss_kind="ce")
    z, cache = model.forward(np.asarray(x)[None, :], train=False)
    zt = None if teacher_logit is None else np.asarray(teacher_logit, dtype=np.float64)[None, :]
    _, dz = mixed_loss(cfg, z, np.array([label]), zt)
    grads = model.backward(cache, dz)
    dF = grads["F"]
    pre = cache["pre"][0]

    def hist(values):
        counts, edges = np.histogram(values, bins=bins)
        return {"edges": edges.tolist(), "counts": counts.tolist()}

    return {
        "pre_activation": hist(pre),
        "grad_F": hist(dF),
        "F": hist(model.F.values),
        "zero_grad_fraction": float(np.mean(dF == 0.0)),
        "var_pre_activation": float(pre.var()),
        "grad_F_range": [float(dF.min()), float(dF.max())],
    }


def write_histograms(snapshot: dict, out_dir, tag: str) -> list:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for key in ("pre_activation", "grad_F", "F"):
        path = out_dir / f"{tag}_{key}.csv"
        h = snapshot[key]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["bin_left", "bin_right", "count"])
            for lo, hi, c in zip(h["edges"][:-1], h["edges"][1:], h["counts"]):
                w.writerow([repr(lo), repr(hi), c])
        written.append(path)
    return written


def first_misclassified(model, data: Dataset):
    pred = model.predict(data.features)
    wrong = np.flatnonzero(pred != data.labels)
    return int(wrong[0]) if wrong.size else None


# --------------------------------------------------------------------------
# training
# --------------------------------------------------------------------------


def _teacher_matrix(teacher, n: int):
    if teacher is None:
        return None
    logits = getattr(teacher, "logits", teacher)
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[0] != n:
        raise ConfigError(f"teacher logits have {logits.shape[0]} rows, training split has {n}")
    return logits


def train_ldc(cfg: TrainConfig, train: Dataset, test: Dataset | None = None, teacher=None,
              snapshot_epochs=(), eval_every: int = 1, on_epoch_end=None):
    """Train an LDC model; returns ``(model, report)``.

    ``teacher`` is a (train samples, K) logits matrix or a ``TeacherLogits``,
    aligned with the rows of ``train``.  ``snapshot_epochs`` lists 1-based
    epochs after which a gradient snapshot is taken on the first misclassified
    test sample.  ``on_epoch_end(epoch, model)`` is called after every epoch
    (1-based).
    """
    cfg.validate()
    if cfg.uses_teacher and teacher is None:
        raise ConfigError(f"loss {cfg.loss_kind!r} needs teacher logits")
    if cfg.n_levels != train.n_levels:
        raise ConfigError(f"config has {cfg.n_levels} levels, dataset has {train.n_levels}")
    zt_all = _teacher_matrix(teacher, len(train))

    model = LDCModel(train.n_features, train.n_classes, cfg.dim, cfg.value_dim, cfg.n_levels,
                     cfg.normalizer, cfg.delta, cfg.alpha_multiplier, cfg.seed)
    report = RunReport(config=cfg.to_dict())
    n = len(train)
    steps_per_epoch = sum(1 for _ in iter_batches(n, cfg.batch_size, cfg.seed, 0))
    opt = nn.Adam(model.parameters(), cfg.lr0, max(1, cfg.epochs * steps_per_epoch), cfg.clip)
    latents = {"F": model.F, "C": model.C}
    osc = {k: OscillationState.create(m.values, cfg.qat.momentum, cfg.qat.threshold,
                                      cfg.qat.start_epoch) for k, m in latents.items()}
    held = train.features[:cfg.batch_size]

    for epoch in range(cfg.epochs):
        total_loss = 0.0
        for idx in iter_batches(n, cfg.batch_size, cfg.seed, epoch):
            z, cache = model.forward(train.features[idx], train=True)
            zt = None if zt_all is None else zt_all[idx]
            loss, dz = mixed_loss(cfg, z, train.labels[idx], zt)
            if not np.isfinite(loss):
                dump = gradient_snapshot(model, train.features[idx[0]], int(train.labels[idx[0]]))
                raise nn.NonFiniteError(
                    f"non-finite loss at epoch {epoch}: "
                    f"F range {dump['F']['edges'][0]}..{dump['F']['edges'][-1]}")
            grads = model.backward(cache, dz)
            opt.step(grads, frozen=model.frozen_masks())
            if cfg.latent_clip is not None:
                for m in latents.values():
                    np.clip(m.values, -cfg.latent_clip, cfg.latent_clip, out=m.values)
            if cfg.qat.enabled:
                for k, m in latents.items():
                    update_oscillation(osc[k], m.values)
                    apply_freezing(osc[k], m, epoch + 1)  # epochs counted from 1
            total_loss += float(loss) * len(idx)

        row = {
            "epoch": epoch + 1,
            "train_loss": total_loss / n,
            "frozen_F": model.F.frozen_fraction,
            "frozen_C": model.C.frozen_fraction,
            "held_var": held_variance(model, held),
        }
        if test is not None and ((epoch + 1) % eval_every == 0 or epoch + 1 == cfg.epochs):
            row["test_accuracy"] = evaluate(model, test).accuracy
        else:
            row["test_accuracy"] = None
        report.epochs.append(row)
        log.info("epoch %d: %s", epoch + 1, row)
        if epoch + 1 in snapshot_epochs and test is not None:
            i = first_misclassified(model, test)
            if i is not None:
                snap = gradient_snapshot(model, test.features[i], int(test.labels[i]))
                snap["epoch"], snap["sample"] = epoch + 1, i
                report.snapshots.append(snap)
        if on_epoch_end is not None:
            on_epoch_end(epoch + 1, model)

    if test is not None:
        report.final = evaluate(model, test).to_dict()
    return model, report
