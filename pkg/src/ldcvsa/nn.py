"""Real-valued kernels with hand-written backward passes.

Everything here works on float64 numpy arrays.  Row-batched kernels treat the
first axis as the batch; losses are averaged over rows and their gradients are
scaled accordingly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


class NonFiniteError(FloatingPointError):
    """Raised when a kernel produces NaN or Inf."""


def check_finite(name: str, *arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NonFiniteError(f"non-finite values in {name}")


# --------------------------------------------------------------------------
# linear
# --------------------------------------------------------------------------


def linear_forward(x, W, b):
    """y = x W^T + b.  ``x`` is (rows, in), ``W`` is (out, in)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[1] or b.shape != (W.shape[0],):
        raise ValueError(f"shape mismatch: x{x.shape} W{W.shape} b{b.shape}")
    y = x @ W.T + b
    check_finite("linear_forward", y)
    return y, (x, W)


def linear_backward(cache, dy):
    x, W = cache
    dx = dy @ W
    dW = dy.T @ x
    db = dy.sum(axis=0)
    return dx, dW, db


# --------------------------------------------------------------------------
# batch normalization
# --------------------------------------------------------------------------


@dataclass
class BatchNorm:
    """Per-dimension affine normalizer with running statistics."""

    w: np.ndarray
    b: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = BN_EPS
    momentum: float = BN_MOMENTUM

    @classmethod
    def create(cls, dim: int, eps: float = BN_EPS, momentum: float = BN_MOMENTUM) -> "BatchNorm":
        return cls(
            w=np.ones(dim),
            b=np.zeros(dim),
            running_mean=np.zeros(dim),
            running_var=np.ones(dim),
            eps=eps,
            momentum=momentum,
        )

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")


def bn_eval(y, mean, var, w, b, eps):
    """The eval-mode expression.  The threshold fold is checked against this
    exact sequence of float operations, so keep the two in sync."""
    return (y - mean) / np.sqrt(var + eps) * w + b


def bn_forward(y, bn: BatchNorm, train: bool, counts=None, update_stats: bool = True):
    """Normalize the columns of ``y``.

    ``counts`` optionally gives each row a multiplicity; the statistics are
    then those of the expanded batch in which row ``j`` appears ``counts[j]``
    times.  Rows with zero count are normalized but do not contribute.
    Running variance is tracked with the unbiased estimator.
    """
    y = np.asarray(y, dtype=np.float64)
    if not train:
        out = bn_eval(y, bn.running_mean, bn.running_var, bn.w, bn.b, bn.eps)
        inv_std = 1.0 / np.sqrt(bn.running_var + bn.eps)
        xhat = (y - bn.running_mean) * inv_std
        check_finite("bn_forward", out)
        return out, ("eval", xhat, inv_std, bn.w)

    c = np.ones(y.shape[0]) if counts is None else np.asarray(counts, dtype=np.float64)
    total = c.sum()
    if total < 2:
        raise ValueError("batch normalization in train mode needs a batch of at least 2")
    mean = c @ y / total
    centered = y - mean
    var = c @ (centered * centered) / total
    inv_std = 1.0 / np.sqrt(var + bn.eps)
    xhat = centered * inv_std
    out = xhat * bn.w + bn.b
    check_finite("bn_forward", out)
    if update_stats:
        m = bn.momentum
        bn.running_mean = (1 - m) * bn.running_mean + m * mean
        bn.running_var = (1 - m) * bn.running_var + m * var * total / (total - 1)
    return out, ("train", xhat, inv_std, bn.w, c, total)


def bn_backward(cache, dout):
    """Gradients (dy, dw, db).

    For a ``counts``-weighted forward, ``dout[j]`` must be the upstream
    gradient already summed over the copies of row ``j``.
    """
    if cache[0] == "eval":
        _, xhat, inv_std, w = cache
        return dout * w * inv_std, (dout * xhat).sum(axis=0), dout.sum(axis=0)
    _, xhat, inv_std, w, c, total = cache
    dw = (dout * xhat).sum(axis=0)
    db = dout.sum(axis=0)
    dxhat = dout * w
    mean_dxhat = dxhat.sum(axis=0) / total
    mean_dxhat_xhat = (dxhat * xhat).sum(axis=0) / total
    dy = inv_std * (dxhat - c[:, None] * (mean_dxhat + xhat * mean_dxhat_xhat))
    return dy, dw, db


# --------------------------------------------------------------------------
# per-sample normalizers (LayerNorm / RMSNorm over the last axis)
# --------------------------------------------------------------------------


@dataclass
class LayerNorm:
    w: np.ndarray
    b: np.ndarray
    eps: float = BN_EPS

    @classmethod
    def create(cls, dim: int, eps: float = BN_EPS) -> "LayerNorm":
        return cls(np.ones(dim), np.zeros(dim), eps)


@dataclass
class RMSNorm:
    w: np.ndarray
    eps: float = BN_EPS
    b: np.ndarray = field(default=None)  # unused; RMSNorm carries no shift

    @classmethod
    def create(cls, dim: int, eps: float = BN_EPS) -> "RMSNorm":
        return cls(np.ones(dim), eps)


def layer_norm_forward(y, ln: LayerNorm):
    mean = y.mean(axis=1, keepdims=True)
    centered = y - mean
    inv_std = 1.0 / np.sqrt((centered * centered).mean(axis=1, keepdims=True) + ln.eps)
    xhat = centered * inv_std
    out = xhat * ln.w + ln.b
    check_finite("layer_norm_forward", out)
    return out, (xhat, inv_std, ln.w)


def layer_norm_backward(cache, dout):
    xhat, inv_std, w = cache
    dxhat = dout * w
    dy = inv_std * (
        dxhat - dxhat.mean(axis=1, keepdims=True) - xhat * (dxhat * xhat).mean(axis=1, keepdims=True)
    )
    return dy, (dout * xhat).sum(axis=0), dout.sum(axis=0)


def rms_norm_forward(y, rn: RMSNorm):
    inv_rms = 1.0 / np.sqrt((y * y).mean(axis=1, keepdims=True) + rn.eps)
    xhat = y * inv_rms
    out = xhat * rn.w
    check_finite("rms_norm_forward", out)
    return out, (xhat, inv_rms, rn.w)


def rms_norm_backward(cache, dout):
    xhat, inv_rms, w = cache
    dxhat = dout * w
    dy = inv_rms * (dxhat - xhat * (dxhat * xhat).mean(axis=1, keepdims=True))
    return dy, (dout * xhat).sum(axis=0), None


# --------------------------------------------------------------------------
# softmax family and losses
# --------------------------------------------------------------------------


def log_softmax(z):
    z = np.asarray(z, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(z):
    return np.exp(log_softmax(z))


def _rows(a):
    a = np.asarray(a, dtype=np.float64)
    return a[None, :] if a.ndim == 1 else a


def _shape_like(dz, z):
    return dz[0] if np.ndim(z) == 1 else dz


def softmax_ce(z, t):
    """Cross-entropy of ``softmax(z)`` against target distribution ``t``.

    Returns the row-averaged loss and dL/dz.
    """
    z2, t2 = _rows(z), _rows(t)
    n = z2.shape[0]
    logp = log_softmax(z2)
    loss = -(t2 * logp).sum() / n
    dz = (np.exp(logp) - t2) / n
    return loss, _shape_like(dz, z)


def _check_temperature(T):
    if not T > 0:
        raise ValueError(f"temperature must be positive, got {T}")


def kd_kl_loss(z, z_teacher, T: float):
    """T^2 * KL(softmax(z_t/T) || softmax(z/T)).

    The gradient is T * (softmax(z/T) - softmax(z_t/T)), i.e. the class-vector
    gradient of temperature-scaled distillation as used for LDC training.
    """
    _check_temperature(T)
    z2, zt2 = _rows(z), _rows(z_teacher)
    n = z2.shape[0]
    logq = log_softmax(z2 / T)
    logp = log_softmax(zt2 / T)
    p = np.exp(logp)
    loss = T * T * (p * (logp - logq)).sum() / n
    dz = T * (np.exp(logq) - p) / n
    return loss, _shape_like(dz, z)


def js_loss(z, z_teacher, T: float):
    """T^2 * Jensen-Shannon divergence between teacher and student softmaxes."""
    _check_temperature(T)
    z2, zt2 = _rows(z), _rows(z_teacher)
    n = z2.shape[0]
    logq = log_softmax(z2 / T)
    logp = log_softmax(zt2 / T)
    p, q = np.exp(logp), np.exp(logq)
    m = 0.5 * (p + q)
    logm = np.log(m)
    kl_pm = np.where(p > 0, p * (logp - logm), 0.0).sum()
    kl_qm = np.where(q > 0, q * (logq - logm), 0.0).sum()
    loss = T * T * 0.5 * (kl_pm + kl_qm) / n
    # d loss / d q = T^2/2 * log(q/m); then back through softmax(z/T)
    g = 0.5 * T * T * (logq - logm)
    dz = q * (g - (q * g).sum(axis=-1, keepdims=True)) / T / n
    return loss, _shape_like(dz, z)


def label_smooth(t, f: float, K: int | None = None):
    """f * t + (1 - f) / K."""
    if not 0.0 <= f <= 1.0:
        raise ValueError(f"smoothing factor must lie in [0, 1], got {f}")
    t = np.asarray(t, dtype=np.float64)
    K = t.shape[-1] if K is None else K
    return f * t + (1.0 - f) / K


def one_hot(labels, K: int):
    labels = np.asarray(labels)
    out = np.zeros(labels.shape + (K,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


def entropy(p):
    """Shannon entropy in nats along the last axis, with 0 log 0 = 0."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    return -terms.sum(axis=-1)


# --------------------------------------------------------------------------
# optimizer
# --------------------------------------------------------------------------


class Adam:
    """Adam with elementwise gradient clipping and a linear decay to zero.

    At step ``t`` (0-based) the learning rate is ``lr0 * (1 - t / total_steps)``.
    Entries flagged in ``frozen`` are never modified.
    """

    def __init__(self, params: dict, lr0=1e-3, total_steps=1, clip=1.0,
                 beta1=0.9, beta2=0.999, eps=1e-8):
        if total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if not clip > 0:
            raise ValueError("clip must be positive")
        self.params = params
        self.lr0 = lr0
        self.total_steps = total_steps
        self.clip = clip
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    @property
    def lr(self) -> float:
        return self.lr0 * max(0.0, 1.0 - self.t / self.total_steps)

    def step(self, grads: dict, frozen: dict | None = None) -> None:
        lr = self.lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        corr1 = 1.0 - b1 ** self.t
        corr2 = 1.0 - b2 ** self.t
        for name, p in self.params.items():
            g = grads.get(name)
            if g is None:
                continue
            g = np.clip(g, -self.clip, self.clip)
            check_finite(f"gradient of {name}", g)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            update = lr * (m / corr1) / (np.sqrt(v / corr2) + self.eps)
            mask = None if frozen is None else frozen.get(name)
            if mask is not None:
                update = np.where(mask, 0.0, update)
            p -= update
