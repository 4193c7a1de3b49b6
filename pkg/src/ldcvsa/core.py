"""The LDC network: ValueBox -> binary encoding layer -> binary similarity layer.

Latent (real) weights are binarized with ``sign`` (ties to +1) and scaled by
l1-mean factors in the forward pass.  The backward pass is straight-through:
``sign`` on activations passes gradient where ``|x| <= delta``; ``sign`` on
weights is the identity.  Scaling factors are held constant in backward.
"""
from __future__ import annotations

import io
import zipfile

import numba
import numpy as np

from . import nn

VALUEBOX_HIDDEN = 20
NORMALIZERS = ("none", "batch", "layer", "rms")


def sign(x):
    """Elementwise sign with sign(0) = +1, as float."""
    return np.where(np.asarray(x) >= 0, 1.0, -1.0)


class LatentMatrix:
    """Real-valued shadow of a binary vector set (rows are vectors)."""

    def __init__(self, values, role: str, frozen=None):
        if role not in ("feature", "class"):
            raise ValueError(f"unknown role {role!r}")
        self.values = np.asarray(values, dtype=np.float64)
        self.role = role
        self.frozen = np.zeros(self.values.shape, dtype=bool) if frozen is None else np.asarray(frozen, bool)
        if self.frozen.shape != self.values.shape:
            raise ValueError("frozen mask shape does not match values")

    @classmethod
    def uniform(cls, shape, role: str, rng: np.random.Generator, scale: float = 0.2):
        return cls(rng.uniform(-scale, scale, size=shape), role)

    def freeze(self, mask) -> None:
        """Pin entries to their sign.  Frozen entries stay frozen."""
        mask = np.asarray(mask, bool) & ~self.frozen
        self.values[mask] = sign(self.values[mask])
        self.frozen |= mask

    @property
    def frozen_fraction(self) -> float:
        return float(self.frozen.mean())


def binarize_feature(F: LatentMatrix, multiplier: float = 1.0):
    """Signs of F^r plus one scaling factor per column (dimension).

    alpha_d is the mean |F^r| over the non-frozen rows of column d, or 1 when
    the whole column is frozen.
    """
    if F.role != "feature":
        raise ValueError("binarize_feature expects a feature matrix")
    bits = sign(F.values)
    active = ~F.frozen
    n_active = active.sum(axis=0)
    l1 = np.where(active, np.abs(F.values), 0.0).sum(axis=0)
    alpha = np.where(n_active > 0, l1 / np.maximum(n_active, 1), 1.0)
    return bits, multiplier * alpha


def binarize_class(C: LatentMatrix):
    """Signs of C^r plus a single scaling factor over all active entries."""
    if C.role != "class":
        raise ValueError("binarize_class expects a class matrix")
    bits = sign(C.values)
    active = ~C.frozen
    alpha = float(np.abs(C.values[active]).mean()) if active.any() else 1.0
    return bits, alpha


def ste_backward(x, upstream, delta: float = 1.0):
    """Straight-through gradient of sign: pass where |x| <= delta."""
    if not delta > 0:
        raise ValueError("delta must be positive")
    return np.where(np.abs(x) <= delta, upstream, 0.0)


# --------------------------------------------------------------------------
# ValueBox
# --------------------------------------------------------------------------


class ValueBox:
    """level -> Linear(1, 20) -> BN(20) -> tanh -> Linear(20, D_v) -> sign.

    The D_v-bit output is tiled D / D_v times to form the value vector.
    All computation runs on the M distinct levels; a batch is represented by
    per-level counts, which gives the same statistics and gradients as
    evaluating every (sample, feature) occurrence separately.
    """

    def __init__(self, n_levels: int, value_dim: int, dim: int, rng: np.random.Generator):
        if n_levels < 2:
            raise ValueError("need at least 2 levels")
        if dim % value_dim:
            raise ValueError(f"dimension {dim} is not a multiple of value dimension {value_dim}")
        self.n_levels = n_levels
        self.value_dim = value_dim
        self.dim = dim
        a1 = 1.0  # 1/sqrt(fan_in) with fan_in = 1
        a2 = 1.0 / np.sqrt(VALUEBOX_HIDDEN)
        self.W1 = rng.uniform(-a1, a1, size=(VALUEBOX_HIDDEN, 1))
        self.b1 = rng.uniform(-a1, a1, size=VALUEBOX_HIDDEN)
        self.bn = nn.BatchNorm.create(VALUEBOX_HIDDEN)
        self.W2 = rng.uniform(-a2, a2, size=(value_dim, VALUEBOX_HIDDEN))
        self.b2 = rng.uniform(-a2, a2, size=value_dim)

    @property
    def repeats(self) -> int:
        return self.dim // self.value_dim

    def parameters(self) -> dict:
        return {"vb.W1": self.W1, "vb.b1": self.b1, "vb.bn.w": self.bn.w,
                "vb.bn.b": self.bn.b, "vb.W2": self.W2, "vb.b2": self.b2}

    def inputs(self):
        return (np.arange(self.n_levels, dtype=np.float64) / (self.n_levels - 1))[:, None]

    def forward(self, counts=None, train: bool = False, update_stats: bool = True):
        """Pre-sign activations for every level, shape (M, D_v)."""
        h1, c1 = nn.linear_forward(self.inputs(), self.W1, self.b1)
        h2, c2 = nn.bn_forward(h1, self.bn, train=train, counts=counts, update_stats=update_stats)
        h3 = np.tanh(h2)
        a, c4 = nn.linear_forward(h3, self.W2, self.b2)
        return a, (c1, c2, h3, c4, a)

    def lut(self):
        """Eval-mode value bits for all levels, shape (M, D_v)."""
        a, _ = self.forward(train=False)
        return sign(a)

    def __call__(self, level: int):
        """Eval-mode value bits of a single level, and the pre-sign cache."""
        if not 0 <= level < self.n_levels:
            raise ValueError(f"level {level} outside [0, {self.n_levels - 1}]")
        a, cache = self.forward(train=False)
        return sign(a[level]), cache

    def expand(self, vbits):
        """Tile D_v-bit rows into D-bit value vectors."""
        return np.tile(vbits, (1, self.repeats))

    def backward(self, cache, dvbits) -> dict:
        """``dvbits`` is dL/d(sign output) per level, summed over occurrences."""
        c1, c2, h3, c4, a = cache
        da = ste_backward(a, dvbits, 1.0)
        dh3, dW2, db2 = nn.linear_backward(c4, da)
        dh2 = dh3 * (1.0 - h3 * h3)
        dh1, dbw, dbb = nn.bn_backward(c2, dh2)
        _, dW1, db1 = nn.linear_backward(c1, dh1)
        return {"vb.W1": dW1, "vb.b1": db1, "vb.bn.w": dbw, "vb.bn.b": dbb,
                "vb.W2": dW2, "vb.b2": db2}


# --------------------------------------------------------------------------
# encoding and similarity
# --------------------------------------------------------------------------


@numba.njit(cache=True)
def _accumulate(X, vfull, W):
    B, N = X.shape
    D = W.shape[1]
    y = np.zeros((B, D))
    for b in range(B):
        for i in range(N):
            level = X[b, i]
            for d in range(D):
                y[b, d] += W[i, d] * vfull[level, d]
    return y


@numba.njit(cache=True)
def _accumulate_backward(X, vfull, W, dy):
    B, N = X.shape
    D = W.shape[1]
    dW = np.zeros((N, D))
    dV = np.zeros((vfull.shape[0], D))
    for b in range(B):
        for i in range(N):
            level = X[b, i]
            for d in range(D):
                g = dy[b, d]
                dW[i, d] += vfull[level, d] * g
                dV[level, d] += W[i, d] * g
    return dW, dV


def accumulate(X, vfull, W):
    """y[b, d] = sum_i W[i, d] * vfull[X[b, i], d]."""
    return _accumulate(np.ascontiguousarray(X), np.ascontiguousarray(vfull, dtype=np.float64),
                       np.ascontiguousarray(W, dtype=np.float64))


def accumulate_backward(X, vfull, W, dy):
    """Gradients of ``accumulate`` w.r.t. W (N, D) and the value table (M, D).

    The value-table gradient is summed over every (sample, feature) occurrence
    of each level.
    """
    return _accumulate_backward(np.ascontiguousarray(X), np.ascontiguousarray(vfull, dtype=np.float64),
                                np.ascontiguousarray(W, dtype=np.float64),
                                np.ascontiguousarray(dy, dtype=np.float64))


def integer_accumulation(vfull, X, fbits):
    """Exact encoding sums sum_i F_i o V(x_i); float dtype with integral values."""
    return accumulate(X, vfull, fbits)


def encode(X, fbits, alpha, vbits, norm=None, train: bool = False):
    """Binary sample vectors s = sign(norm(alpha * sum_i F_i o V(x_i))).

    Returns ``(s, pre, y, norm_cache)`` where ``pre`` is the input to sign.
    """
    X = np.asarray(X)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != fbits.shape[0]:
        raise ValueError(f"sample has {X.shape[1]} features, model expects {fbits.shape[0]}")
    if fbits.shape[1] % vbits.shape[1]:
        raise ValueError("feature dimension is not a multiple of the value dimension")
    vfull = np.tile(vbits, (1, fbits.shape[1] // vbits.shape[1]))
    y = alpha * integer_accumulation(vfull, X, fbits)
    pre, cache = normalize(norm, y, train)
    return sign(pre), pre, y, cache


def normalize(norm, y, train: bool, update_stats: bool = True):
    if norm is None:
        return y, None
    if isinstance(norm, nn.BatchNorm):
        return nn.bn_forward(y, norm, train=train, update_stats=update_stats)
    if isinstance(norm, nn.LayerNorm):
        return nn.layer_norm_forward(y, norm)
    return nn.rms_norm_forward(y, norm)


def normalize_backward(norm, cache, dout):
    if isinstance(norm, nn.BatchNorm):
        return nn.bn_backward(cache, dout)
    if isinstance(norm, nn.LayerNorm):
        return nn.layer_norm_backward(cache, dout)
    return nn.rms_norm_backward(cache, dout)


def similarity(s, cbits, alpha_c: float = 1.0):
    """z_k = alpha(C) * <C_k, s>."""
    return alpha_c * (np.asarray(s, dtype=np.float64) @ np.asarray(cbits, dtype=np.float64).T)


def argmax_label(z):
    """Argmax along the last axis; ties go to the lowest index."""
    return np.argmax(z, axis=-1)


# --------------------------------------------------------------------------
# the model
# --------------------------------------------------------------------------


class LDCModel:
    """Trainable LDC classifier holding all latent parameters."""

    def __init__(self, n_features: int, n_classes: int, dim: int = 64, value_dim: int = 16,
                 n_levels: int = 256, normalizer: str = "batch", delta: float = 1.0,
                 alpha_multiplier: float = 1.0, seed: int = 0, init_scale: float = 0.2):
        if normalizer not in NORMALIZERS:
            raise ValueError(f"normalizer must be one of {NORMALIZERS}")
        if dim % value_dim:
            raise ValueError(f"dimension {dim} is not a multiple of value dimension {value_dim}")
        rng = np.random.default_rng(seed)
        self.n_features, self.n_classes = n_features, n_classes
        self.dim, self.value_dim, self.n_levels = dim, value_dim, n_levels
        self.normalizer = normalizer
        self.delta = delta
        self.alpha_multiplier = alpha_multiplier
        self.vb = ValueBox(n_levels, value_dim, dim, rng)
        self.F = LatentMatrix.uniform((n_features, dim), "feature", rng, init_scale)
        self.C = LatentMatrix.uniform((n_classes, dim), "class", rng, init_scale)
        self.norm = {
            "none": lambda: None,
            "batch": lambda: nn.BatchNorm.create(dim),
            "layer": lambda: nn.LayerNorm.create(dim),
            "rms": lambda: nn.RMSNorm.create(dim),
        }[normalizer]()

    # -- parameters ---------------------------------------------------------

    def parameters(self) -> dict:
        params = {"F": self.F.values, "C": self.C.values, **self.vb.parameters()}
        if self.norm is not None:
            params["norm.w"] = self.norm.w
            if self.norm.b is not None:
                params["norm.b"] = self.norm.b
        return params

    def frozen_masks(self) -> dict:
        return {"F": self.F.frozen, "C": self.C.frozen}

    def binarized(self):
        fbits, alpha_f = binarize_feature(self.F, self.alpha_multiplier)
        cbits, alpha_c = binarize_class(self.C)
        return fbits, alpha_f, cbits, alpha_c

    # -- forward / backward -------------------------------------------------

    def forward(self, X, train: bool = False, update_stats: bool = True):
        X = np.asarray(X)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        counts = np.bincount(X.ravel(), minlength=self.n_levels) if train else None
        a, vb_cache = self.vb.forward(counts=counts, train=train, update_stats=update_stats)
        vfull = self.vb.expand(sign(a))
        fbits, alpha_f, cbits, alpha_c = self.binarized()
        y = alpha_f * accumulate(X, vfull, fbits)
        pre, norm_cache = normalize(self.norm, y, train, update_stats)
        s = sign(pre)
        z = similarity(s, cbits, alpha_c)
        cache = dict(X=X, vb_cache=vb_cache, vfull=vfull, fbits=fbits, alpha_f=alpha_f,
                     cbits=cbits, alpha_c=alpha_c, y=y, pre=pre, norm_cache=norm_cache, s=s)
        return z, cache

    def backward(self, cache, dz) -> dict:
        """Gradients of all parameters given dL/dz (already batch-averaged)."""
        if cache is None:
            raise ValueError("backward needs the cache of a forward pass")
        s, alpha_c, cbits = cache["s"], cache["alpha_c"], cache["cbits"]
        grads = {"C": alpha_c * (dz.T @ s)}
        ds = alpha_c * (dz @ cbits)
        dpre = ste_backward(cache["pre"], ds, self.delta)
        if self.norm is None:
            dy = dpre
        else:
            dy, dw, db = normalize_backward(self.norm, cache["norm_cache"], dpre)
            grads["norm.w"] = dw
            if db is not None:
                grads["norm.b"] = db
        W = cache["alpha_f"] * cache["fbits"]
        dW, dvfull = accumulate_backward(cache["X"], cache["vfull"], W, dy)
        grads["F"] = cache["alpha_f"] * dW
        dvbits = dvfull.reshape(self.n_levels, self.vb.repeats, self.value_dim).sum(axis=1)
        grads.update(self.vb.backward(cache["vb_cache"], dvbits))
        return grads

    # -- inference ----------------------------------------------------------

    def decision_function(self, X, batch_size: int = 1000):
        """Eval-mode scores z (scaled by alpha(C))."""
        X = np.asarray(X)
        if X.ndim == 1:
            X = X[None, :]
        vbits = self.vb.lut()
        fbits, alpha_f, cbits, alpha_c = self.binarized()
        out = np.empty((X.shape[0], self.n_classes))
        for start in range(0, X.shape[0], batch_size):
            xb = X[start:start + batch_size]
            s, _, _, _ = encode(xb, fbits, alpha_f, vbits, self.norm, train=False)
            out[start:start + batch_size] = similarity(s, cbits, alpha_c)
        return out

    def predict(self, X):
        return argmax_label(self.decision_function(X))

    def predict_proba(self, X):
        return nn.softmax(self.decision_function(X))

    # -- persistence --------------------------------------------------------

    def state_dict(self) -> dict:
        state = {f"param:{k}": v for k, v in self.parameters().items()}
        state["frozen:F"] = self.F.frozen
        state["frozen:C"] = self.C.frozen
        state["vb.bn.running_mean"] = self.vb.bn.running_mean
        state["vb.bn.running_var"] = self.vb.bn.running_var
        if isinstance(self.norm, nn.BatchNorm):
            state["norm.running_mean"] = self.norm.running_mean
            state["norm.running_var"] = self.norm.running_var
        state["meta"] = np.array([self.n_features, self.n_classes, self.dim, self.value_dim,
                                  self.n_levels], dtype=np.int64)
        state["hyper"] = np.array([self.delta, self.alpha_multiplier])
        state["normalizer"] = np.array(self.normalizer)
        return state

    @classmethod
    def from_state_dict(cls, state) -> "LDCModel":
        N, K, D, Dv, M = (int(v) for v in state["meta"])
        delta, mult = (float(v) for v in state["hyper"])
        model = cls(N, K, D, Dv, M, normalizer=str(state["normalizer"]), delta=delta,
                    alpha_multiplier=mult)
        for name, arr in model.parameters().items():
            arr[...] = state[f"param:{name}"]
        model.F.frozen[...] = state["frozen:F"]
        model.C.frozen[...] = state["frozen:C"]
        model.vb.bn.running_mean = np.array(state["vb.bn.running_mean"], dtype=np.float64)
        model.vb.bn.running_var = np.array(state["vb.bn.running_var"], dtype=np.float64)
        if isinstance(model.norm, nn.BatchNorm):
            model.norm.running_mean = np.array(state["norm.running_mean"], dtype=np.float64)
            model.norm.running_var = np.array(state["norm.running_var"], dtype=np.float64)
        return model

    def save(self, path) -> None:
        # fixed zip timestamps keep checkpoints byte-identical across runs
        with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
            for name, arr in self.state_dict().items():
                buf = io.BytesIO()
                np.lib.format.write_array(buf, np.asarray(arr), allow_pickle=False)
                zf.writestr(zipfile.ZipInfo(name + ".npy", date_time=(1980, 1, 1, 0, 0, 0)),
                            buf.getvalue())

    @classmethod
    def load(cls, path) -> "LDCModel":
        with np.load(path, allow_pickle=False) as data:
            return cls.from_state_dict({k: data[k] for k in data.files})
