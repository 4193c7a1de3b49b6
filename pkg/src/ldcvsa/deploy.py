"""Integer-only deployment: BN threshold folding, bit packing, packed inference,
hardware estimates and bit-error injection.

Bits are stored with 1 meaning +1 and 0 meaning -1.  For a sample the encoder
computes ``y_d = N - 2 * popcount(F[:, d] xor V(x)[:, d])``, which equals the
sum of the +-1 products, and the sample bit is ``y_d >= theta_d`` (or
``y_d <= theta_d`` for flipped dimensions).
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import nn
from .core import LDCModel, binarize_feature

MODEL_MAGIC = b"LDCV"
MODEL_VERSION = 1
_HEADER = struct.Struct("<4sH5IB")
FLAG_THRESHOLDS = 0x01
ADDER_STAGE_DEPTH = 2  # full-adder depth per adder-tree stage in the CDC model


class FoldError(ValueError):
    pass


class ModelFormatError(ValueError):
    pass


# --------------------------------------------------------------------------
# threshold folding
# --------------------------------------------------------------------------


def fold_bn(bn: nn.BatchNorm, alpha, n_features: int):
    """Replace ``sign(BN(alpha_d * y))`` by an integer comparison on ``y``.

    Returns ``(theta, flip, const_mask, const_sign)``.  For ``w_d > 0`` the bit
    is ``y >= theta_d``; for ``w_d < 0`` it is ``y <= theta_d`` (``flip``); for
    ``w_d == 0`` it is the constant ``sign(b_d)``.

    theta starts from the closed form ceil/floor((E - sqrt(Var+eps) b/w) / alpha)
    and is then nudged until it agrees with the eval-mode BN expression on the
    integer grid, so rounding in the closed form can never cause a mismatch.
    """
    alpha = np.asarray(alpha, dtype=np.float64)
    D = alpha.shape[0]
    if np.any(alpha <= 0):
        raise FoldError("scaling factor is zero (degenerate column); cannot fold")
    N = int(n_features)
    mean, var = np.asarray(bn.running_mean, float), np.asarray(bn.running_var, float)
    w, b = np.asarray(bn.w, float), np.asarray(bn.b, float)
    theta = np.zeros(D, dtype=np.int64)
    flip = w < 0
    const_mask = w == 0
    const_sign = b >= 0

    def bit(d, y):
        out = nn.bn_eval(alpha[d] * float(y), mean[d], var[d], w[d], b[d], bn.eps)
        return out >= 0

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        q = (mean - np.sqrt(var + bn.eps) * b / w) / alpha
    for d in range(D):
        if const_mask[d]:
            continue
        qd = q[d]
        if not np.isfinite(qd):
            t = N + 1 if qd > 0 else -N - 1
        else:
            t = math.ceil(qd) if w[d] > 0 else math.floor(qd)
        t = int(min(max(t, -N - 1), N + 1))
        if w[d] > 0:
            # smallest y in [-N, N] with bit(y) true; N + 1 when none
            while t > -N and bit(d, t - 1):
                t -= 1
            while t <= N and not bit(d, t):
                t += 1
        else:
            # largest y in [-N, N] with bit(y) true; -N - 1 when none
            while t < N and bit(d, t + 1):
                t += 1
            while t >= -N and not bit(d, t):
                t -= 1
        theta[d] = t
    return theta, flip, const_mask, const_sign


def folded_bits(y_int, theta, flip, const_mask, const_sign):
    """Sample bits (bool, True = +1) from integer accumulations ``y_int``."""
    y_int = np.asarray(y_int)
    s = np.where(flip, y_int <= theta, y_int >= theta)
    return np.where(const_mask, const_sign, s)


# --------------------------------------------------------------------------
# packed model
# --------------------------------------------------------------------------


@dataclass
class PackedModel:
    lut: np.ndarray  # (M, D_v) bool
    fbits: np.ndarray  # (N, D) bool
    cbits: np.ndarray  # (K, D) bool
    theta: np.ndarray  # (D,) int64
    flip: np.ndarray  # (D,) bool
    const_mask: np.ndarray  # (D,) bool
    const_sign: np.ndarray  # (D,) bool
    has_thresholds: bool

    def __post_init__(self):
        self.lut = np.asarray(self.lut, dtype=bool)
        self.fbits = np.asarray(self.fbits, dtype=bool)
        self.cbits = np.asarray(self.cbits, dtype=bool)
        self.theta = np.asarray(self.theta, dtype=np.int64)
        for name in ("flip", "const_mask", "const_sign"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=bool))
        M, Dv = self.lut.shape
        N, D = self.fbits.shape
        if D % Dv:
            raise ModelFormatError("D is not a multiple of D_v")
        if self.cbits.shape[1] != D or any(a.shape != (D,) for a in
                                           (self.theta, self.flip, self.const_mask, self.const_sign)):
            raise ModelFormatError("inconsistent dimensions")
        if np.any(np.abs(self.theta) > N + 1):
            raise ModelFormatError("threshold outside [-N-1, N+1]")

    @property
    def dims(self) -> dict:
        M, Dv = self.lut.shape
        N, D = self.fbits.shape
        return {"N": N, "D": D, "D_v": Dv, "M": M, "K": self.cbits.shape[0]}

    def __eq__(self, other):
        if not isinstance(other, PackedModel):
            return NotImplemented
        return self.has_thresholds == other.has_thresholds and all(
            np.array_equal(getattr(self, k), getattr(other, k))
            for k in ("lut", "fbits", "cbits", "theta", "flip", "const_mask", "const_sign"))

    # -- inference ----------------------------------------------------------

    def accumulate(self, X, batch_size: int = 512):
        """Integer encodings y (samples, D) via xor/popcount."""
        X = np.asarray(X)
        if X.ndim == 1:
            X = X[None, :]
        dims = self.dims
        N, D, Dv, M = dims["N"], dims["D"], dims["D_v"], dims["M"]
        if X.shape[1] != N:
            raise ValueError(f"sample has {X.shape[1]} features, model expects {N}")
        if X.size and (X.min() < 0 or X.max() >= M):
            raise ValueError(f"feature levels outside [0, {M - 1}]")
        f_cols = np.packbits(self.fbits.T, axis=1)  # (D, ceil(N/8))
        tile = np.arange(D) % Dv
        out = np.empty((X.shape[0], D), dtype=np.int64)
        for start in range(0, X.shape[0], batch_size):
            xb = X[start:start + batch_size]
            v_cols = np.packbits(self.lut[xb].transpose(0, 2, 1), axis=2)  # (B, Dv, bytes)
            mism = np.bitwise_count(v_cols[:, tile, :] ^ f_cols[None]).sum(axis=2, dtype=np.int64)
            out[start:start + batch_size] = N - 2 * mism
        return out

    def sample_bits(self, y_int):
        if not self.has_thresholds:
            return np.asarray(y_int) >= 0
        return folded_bits(y_int, self.theta, self.flip, self.const_mask, self.const_sign)

    def scores(self, X, batch_size: int = 512):
        """Integer similarities z (samples, K)."""
        s = self.sample_bits(self.accumulate(X, batch_size))
        D = self.dims["D"]
        s_packed = np.packbits(s, axis=1)
        c_packed = np.packbits(self.cbits, axis=1)
        mism = np.bitwise_count(s_packed[:, None, :] ^ c_packed[None]).sum(axis=2, dtype=np.int64)
        return D - 2 * mism

    def predict(self, X, batch_size: int = 512):
        return np.argmax(self.scores(X, batch_size), axis=1)


def pack_model(model: LDCModel) -> PackedModel:
    """Materialize the LUT, drop scaling factors and fold BN into thresholds."""
    if model.normalizer in ("layer", "rms"):
        raise FoldError(f"{model.normalizer} normalization uses per-sample statistics and cannot "
                        "be folded into fixed thresholds")
    lut = model.vb.lut() > 0
    fbits = model.F.values >= 0
    cbits = model.C.values >= 0
    D = model.dim
    zeros = np.zeros(D, dtype=bool)
    if model.normalizer == "batch":
        _, alpha = binarize_feature(model.F, model.alpha_multiplier)
        theta, flip, cmask, csign = fold_bn(model.norm, alpha, model.n_features)
        return PackedModel(lut, fbits, cbits, theta, flip, cmask, csign, True)
    return PackedModel(lut, fbits, cbits, np.zeros(D, dtype=np.int64), zeros, zeros, zeros, False)


def infer_packed(pm: PackedModel, X):
    """Labels (lowest index on ties) and integer scores for one or more samples."""
    z = pm.scores(X)
    return np.argmax(z, axis=1), z


# --------------------------------------------------------------------------
# model file
# --------------------------------------------------------------------------


def _pack_rows(bits) -> bytes:
    return np.packbits(np.asarray(bits, dtype=bool), axis=-1, bitorder="little").tobytes()


def save_packed(pm: PackedModel, path) -> None:
    d = pm.dims
    flags = FLAG_THRESHOLDS if pm.has_thresholds else 0
    parts = [_HEADER.pack(MODEL_MAGIC, MODEL_VERSION, d["N"], d["D"], d["D_v"], d["M"], d["K"], flags),
             _pack_rows(pm.lut), _pack_rows(pm.fbits), _pack_rows(pm.cbits)]
    if pm.has_thresholds:
        parts += [pm.theta.astype("<i4").tobytes(), _pack_rows(pm.flip),
                  _pack_rows(pm.const_mask), _pack_rows(pm.const_sign)]
    Path(path).write_bytes(b"".join(parts))


def load_packed(path) -> PackedModel:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"file not found: {path}")
    data = path.read_bytes()
    if len(data) < _HEADER.size:
        raise ModelFormatError("unexpected end of file")
    magic, version, N, D, Dv, M, K, flags = _HEADER.unpack_from(data)
    if magic != MODEL_MAGIC:
        raise ModelFormatError(f"bad magic {magic!r}")
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported version {version}")
    pos = _HEADER.size

    def take(nbytes):
        nonlocal pos
        if pos + nbytes > len(data):
            raise ModelFormatError("unexpected end of file")
        chunk = data[pos:pos + nbytes]
        pos += nbytes
        return chunk

    def bits(rows, cols):
        row_bytes = (cols + 7) // 8
        raw = np.frombuffer(take(rows * row_bytes), dtype=np.uint8).reshape(rows, row_bytes)
        return np.unpackbits(raw, axis=1, count=cols, bitorder="little").astype(bool)

    lut, fbits, cbits = bits(M, Dv), bits(N, D), bits(K, D)
    has_thresholds = bool(flags & FLAG_THRESHOLDS)
    if has_thresholds:
        theta = np.frombuffer(take(4 * D), dtype="<i4").astype(np.int64)
        flip, cmask, csign = (bits(1, D)[0] for _ in range(3))
    else:
        theta = np.zeros(D, dtype=np.int64)
        flip = cmask = csign = np.zeros(D, dtype=bool)
    if pos != len(data):
        raise ModelFormatError("trailing bytes after model payload")
    return PackedModel(lut, fbits, cbits, theta, flip, cmask, csign, has_thresholds)


# --------------------------------------------------------------------------
# hardware estimates
# --------------------------------------------------------------------------


def threshold_bits(n_features: int) -> int:
    """Signed width holding any theta in [-N-1, N+1]."""
    return math.ceil(math.log2(2 * n_features + 3)) + 1


def memory_bits(dims: dict, has_thresholds: bool) -> dict:
    """Per-component storage in bits."""
    N, D, Dv, M, K = dims["N"], dims["D"], dims["D_v"], dims["M"], dims["K"]
    parts = {"lut": M * Dv, "feature": N * D, "class": K * D, "threshold": 0, "flags": 0}
    if has_thresholds:
        parts["threshold"] = D * threshold_bits(N)
        parts["flags"] = 2 * D
    return parts


def memory_footprint(pm_or_dims, has_thresholds: bool | None = None) -> float:
    """Model size in KB (8192 bits per KB)."""
    if isinstance(pm_or_dims, PackedModel):
        dims, has_thresholds = pm_or_dims.dims, pm_or_dims.has_thresholds
    else:
        dims = pm_or_dims
    return sum(memory_bits(dims, bool(has_thresholds)).values()) / 8192


def _clog2(x: int) -> int:
    return math.ceil(math.log2(x)) if x > 1 else 0


def cdc_estimate(pm_or_dims) -> int:
    """Modeled circuit depth of the combinational inference datapath.

    encoding adder tree + threshold compare + similarity popcount tree +
    argmax comparator tree.  The compare stage is present with or without
    folded BN (a plain model compares against 0), so both share one depth.
    """
    dims = pm_or_dims.dims if isinstance(pm_or_dims, PackedModel) else pm_or_dims
    N, D, K = dims["N"], dims["D"], dims["K"]
    return (_clog2(N) * ADDER_STAGE_DEPTH + _clog2(2 * N + 1) + _clog2(D) * ADDER_STAGE_DEPTH
            + _clog2(K) * _clog2(2 * D + 1))


# --------------------------------------------------------------------------
# fault injection
# --------------------------------------------------------------------------


def inject_bit_errors(pm: PackedModel, p: float, seed: int) -> PackedModel:
    """Flip every LUT/F/C bit independently with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("bit error rate must lie in [0, 1]")
    rng = np.random.Generator(np.random.Philox(key=seed))
    flipped = {}
    for name in ("lut", "fbits", "cbits"):
        bits = getattr(pm, name)
        flipped[name] = bits ^ (rng.random(bits.shape) < p)
    return replace(pm, **flipped)
