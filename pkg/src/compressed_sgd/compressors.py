"""Gradient compressors, their compression factors and wire formats.

Every compressor is split into two phases: ``draw_theta`` consumes the
compressor's randomness and ``apply`` is a deterministic function of the
input and that draw. Sharing one draw across workers (or across a pair of
coupled trajectories) is then just passing the same ``theta`` twice.
"""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .linalg import SeededRng, as_param_vector


class Kind(str, enum.Enum):
    IDENTITY = "identity"
    RANDOM_K = "random_k"
    TOP_K = "top_k"
    SIGN = "sign"
    QUANTIZATION = "quantization"


_KIND_CODE = {Kind.IDENTITY: 0, Kind.RANDOM_K: 1, Kind.TOP_K: 2, Kind.SIGN: 3, Kind.QUANTIZATION: 4}
_CODE_KIND = {v: k for k, v in _KIND_CODE.items()}


class NotACompressor(ValueError):
    """Raised when asking for mu of a map that does not contract."""


@dataclass(frozen=True)
class CompressorSpec:
    kind: Kind
    d: int
    k: int | None = None
    s: int = 1

    def __post_init__(self):
        object.__setattr__(self, "kind", Kind(self.kind))
        if self.d < 1:
            raise ValueError("d must be positive")
        if self.kind in (Kind.RANDOM_K, Kind.TOP_K):
            if self.k is None or not 1 <= self.k <= self.d:
                raise ValueError(f"{self.kind.value} needs 1 <= k <= d, got k={self.k}, d={self.d}")
        if self.kind is Kind.QUANTIZATION and self.s < 1:
            raise ValueError("quantization needs s >= 1")

    @property
    def mu(self) -> float:
        if self.kind is Kind.IDENTITY:
            return 1.0
        if self.kind in (Kind.RANDOM_K, Kind.TOP_K):
            return self.k / self.d
        if self.kind is Kind.SIGN:
            return 1.0 / self.d
        omega = quantization_variance_factor(self.d, self.s)
        if omega >= 1.0:
            raise NotACompressor(
                f"quantization with s={self.s}, d={self.d} has variance factor {omega:.3f} >= 1"
            )
        return 1.0 - omega

    @property
    def linear(self) -> bool:
        return is_linear(self)


def quantization_variance_factor(d: int, s: int) -> float:
    """Worst case of E||Q(x) - x||^2 / ||x||^2.

    For s = 1 this is exactly sqrt(d) - 1 (attained on flat vectors);
    otherwise the usual min(d/s^2, sqrt(d)/s) bound.
    """
    if s == 1:
        return math.sqrt(d) - 1.0
    return min(d / s**2, math.sqrt(d) / s)


def is_linear(spec: CompressorSpec) -> bool:
    return spec.kind in (Kind.IDENTITY, Kind.RANDOM_K)


# ---------------------------------------------------------------------------
# randomness and application

def draw_theta(spec: CompressorSpec, rng: SeededRng, n: int = 1):
    """Draw compressor randomness for ``n`` rows (``None`` when deterministic)."""
    if spec.kind is Kind.RANDOM_K:
        return _partial_fisher_yates(rng, n, spec.d, spec.k)
    if spec.kind is Kind.QUANTIZATION:
        return rng.uniform((n, spec.d))
    return None


def _partial_fisher_yates(rng: SeededRng, n: int, d: int, k: int) -> np.ndarray:
    perm = np.tile(np.arange(d), (n, 1))
    rows = np.arange(n)
    for j in range(k):
        if j == d - 1:
            break
        pick = rng.integers(j, d, size=n)
        a = perm[rows, j].copy()
        perm[rows, j] = perm[rows, pick]
        perm[rows, pick] = a
    return perm[:, :k]


def topk_indices(X: np.ndarray, k: int) -> np.ndarray:
    # stable sort on -|x|: ties go to the lower index
    return np.argsort(-np.abs(X), axis=-1, kind="stable")[..., :k]


def row_norms(X: np.ndarray) -> np.ndarray:
    """Euclidean norm of each row, scaled so huge finite rows do not overflow."""
    m = np.max(np.abs(X), axis=1)
    safe = np.where((m > 0) & np.isfinite(m), m, 1.0)
    return np.where(np.isfinite(m), safe * np.linalg.norm(X / safe[:, None], axis=1), np.inf) * (m > 0)


def _quant_levels(X: np.ndarray, norms: np.ndarray, s: int, u: np.ndarray) -> np.ndarray:
    safe = np.where(norms > 0, norms, 1.0)
    scaled = np.abs(X) / safe[:, None] * s
    low = np.floor(scaled)
    up = u < (scaled - low)
    lev = np.minimum(low + up, s).astype(np.int64)
    lev[norms == 0] = 0
    return lev


def _quant_values(lev: np.ndarray, norms: np.ndarray, s: int, negative: np.ndarray) -> np.ndarray:
    mag = lev * (norms[:, None] / s)
    vals = np.where(negative, -mag, mag)
    return np.where(lev > 0, vals, 0.0)


def apply(spec: CompressorSpec, X: np.ndarray, theta) -> np.ndarray:
    """Apply the compressor row-wise to ``X`` of shape (n, d).

    ``theta`` with a single row is broadcast to every row (shared randomness).
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != spec.d:
        raise ValueError(f"dimension mismatch: expected (*, {spec.d}), got {X.shape}")
    n = X.shape[0]
    kind = spec.kind
    if kind is Kind.IDENTITY:
        return X.copy()
    if kind is Kind.SIGN:
        scale = np.sum(np.abs(X), axis=1) / spec.d
        return np.where(X >= 0, 1.0, -1.0) * scale[:, None]
    if kind in (Kind.RANDOM_K, Kind.TOP_K):
        idx = theta if kind is Kind.RANDOM_K else topk_indices(X, spec.k)
        rows = np.arange(n)[:, None]
        out = np.zeros_like(X)
        out[rows, idx] = X[rows, idx]
        return out
    u = np.broadcast_to(theta, X.shape)
    norms = row_norms(X)
    lev = _quant_levels(X, norms, spec.s, u)
    return _quant_values(lev, norms, spec.s, X < 0)


def compress_rows(spec: CompressorSpec, X: np.ndarray, rng: SeededRng, shared: bool = False) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    theta = draw_theta(spec, rng, 1 if shared else X.shape[0])
    return apply(spec, X, theta)


# ---------------------------------------------------------------------------
# wire format

def _index_bits(d: int) -> int:
    return (d - 1).bit_length()


def message_cost_bits(spec: CompressorSpec, value_bits: int = 64, nnz: int | None = None) -> int:
    """Payload size of one message in bits.

    Quantization has no fixed size; pass the number of nonzero levels of the
    actual message.
    """
    if value_bits not in (32, 64):
        raise ValueError("value_bits must be 32 or 64")
    d = spec.d
    if spec.kind is Kind.IDENTITY:
        return d * value_bits
    if spec.kind is Kind.RANDOM_K:
        # indices are regenerated from the shared seed
        return spec.k * value_bits
    if spec.kind is Kind.TOP_K:
        return spec.k * (value_bits + _index_bits(d))
    if spec.kind is Kind.SIGN:
        return d + value_bits
    if nnz is None:
        raise ValueError("quantization cost depends on the message; pass nnz")
    return nnz * (_index_bits(d) + 1 + _index_bits(spec.s)) + value_bits


class _BitWriter:
    def __init__(self):
        self.acc = 0
        self.nbits = 0

    def put(self, value: int, nbits: int):
        if nbits:
            self.acc |= (int(value) & ((1 << nbits) - 1)) << self.nbits
            self.nbits += nbits

    def put_float(self, x: float, value_bits: int):
        fmt = "<d" if value_bits == 64 else "<f"
        ifmt = "<Q" if value_bits == 64 else "<I"
        self.put(struct.unpack(ifmt, struct.pack(fmt, x))[0], value_bits)

    def to_bytes(self) -> bytes:
        return self.acc.to_bytes((self.nbits + 7) // 8, "little")


class _BitReader:
    def __init__(self, data: bytes):
        self.acc = int.from_bytes(data, "little")
        self.pos = 0

    def get(self, nbits: int) -> int:
        v = (self.acc >> self.pos) & ((1 << nbits) - 1)
        self.pos += nbits
        return v

    def get_float(self, value_bits: int) -> float:
        fmt = "<d" if value_bits == 64 else "<f"
        ifmt = "<Q" if value_bits == 64 else "<I"
        return struct.unpack(fmt, struct.pack(ifmt, self.get(value_bits)))[0]


@dataclass(frozen=True)
class CompressedMessage:
    """One worker's compressed vector as sent on the wire.

    Frame layout (little-endian): one kind byte, one value-width byte, a
    uint32 payload bit count, then the bit-packed payload (LSB first, padded
    to a byte). Only the payload counts towards ``cost_bits``.
    """

    kind: Kind
    payload: bytes
    cost_bits: int
    value_bits: int = 64

    def to_bytes(self) -> bytes:
        return struct.pack("<BBI", _KIND_CODE[self.kind], self.value_bits, self.cost_bits) + self.payload

    @classmethod
    def from_bytes(cls, frame: bytes) -> "CompressedMessage":
        code, value_bits, cost = struct.unpack_from("<BBI", frame)
        return cls(_CODE_KIND[code], bytes(frame[6:]), cost, value_bits)


def encode(spec: CompressorSpec, c: np.ndarray, theta=None, value_bits: int = 64) -> CompressedMessage:
    """Serialize a compressed vector ``c`` (one row) for the given kind."""
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    w = _BitWriter()
    ib = _index_bits(spec.d)
    kind = spec.kind
    if kind is Kind.IDENTITY:
        for v in c:
            w.put_float(v, value_bits)
    elif kind is Kind.RANDOM_K:
        for i in np.asarray(theta).reshape(-1):
            w.put_float(c[i], value_bits)
    elif kind is Kind.TOP_K:
        for i in topk_indices(c[None, :], spec.k)[0] if theta is None else theta:
            w.put(i, ib)
            w.put_float(c[i], value_bits)
    elif kind is Kind.SIGN:
        # every entry has magnitude equal to the scale
        scale = abs(float(c[0]))
        w.put_float(scale, value_bits)
        for v in c:
            w.put(1 if v < 0 else 0, 1)
    else:
        if theta is None:
            raise ValueError("quantization messages need the input norm")
        nz = np.flatnonzero(c)
        norm = float(theta)
        w.put_float(norm, value_bits)
        sb = _index_bits(spec.s)
        for i in nz:
            lev = int(round(abs(c[i]) / (norm / spec.s)))
            w.put(i, ib)
            w.put(1 if c[i] < 0 else 0, 1)
            w.put(lev - 1, sb)
    return CompressedMessage(kind, w.to_bytes(), w.nbits, value_bits)


def decode(spec: CompressorSpec, msg: CompressedMessage, theta=None) -> np.ndarray:
    """Rebuild the dense compressed vector. RandomK needs the shared index draw."""
    r = _BitReader(msg.payload)
    vb = msg.value_bits
    d = spec.d
    ib = _index_bits(d)
    out = np.zeros(d)
    kind = Kind(msg.kind)
    if kind is Kind.IDENTITY:
        for i in range(d):
            out[i] = r.get_float(vb)
    elif kind is Kind.RANDOM_K:
        if theta is None:
            raise ValueError("RandomK messages carry no indices; pass the shared draw")
        for i in np.asarray(theta).reshape(-1):
            out[i] = r.get_float(vb)
    elif kind is Kind.TOP_K:
        for _ in range(spec.k):
            i = r.get(ib)
            out[i] = r.get_float(vb)
    elif kind is Kind.SIGN:
        scale = r.get_float(vb)
        neg = np.array([r.get(1) for _ in range(d)], dtype=bool)
        out = np.where(neg, -1.0, 1.0) * scale
    else:
        norm = r.get_float(vb)
        sb = _index_bits(spec.s)
        nnz = (msg.cost_bits - vb) // (ib + 1 + sb)
        lev = np.zeros((1, d), dtype=np.int64)
        neg = np.zeros((1, d), dtype=bool)
        for _ in range(nnz):
            i = r.get(ib)
            neg[0, i] = bool(r.get(1))
            lev[0, i] = r.get(sb) + 1
        out = _quant_values(lev, np.array([norm]), spec.s, neg)[0]
    return out


def compress(spec: CompressorSpec, x, rng: SeededRng, value_bits: int = 64):
    """Compress a single vector; returns ``(c, message)`` with decode(message) == c."""
    x = as_param_vector(x, spec.d)
    theta = draw_theta(spec, rng, 1)
    c = apply(spec, x[None, :], theta)[0]
    if spec.kind is Kind.RANDOM_K:
        msg = encode(spec, c, theta[0], value_bits)
    elif spec.kind is Kind.QUANTIZATION:
        msg = encode(spec, c, float(row_norms(x[None, :])[0]), value_bits)
    else:
        msg = encode(spec, c, None, value_bits)
    return c, msg


# ---------------------------------------------------------------------------
# compression factor

class FactorEstimate(NamedTuple):
    ratio: float
    stderr: float
    trials: int
    skipped: int


def isotropic_gaussian(d: int) -> Callable[[SeededRng, int], np.ndarray]:
    def sample(rng: SeededRng, n: int) -> np.ndarray:
        return rng.normal((n, d))

    return sample


def compression_factor_estimate(spec: CompressorSpec, sampler, trials: int, rng: SeededRng,
                                chunk: int = 20_000) -> FactorEstimate:
    """Monte-Carlo mean of ||x - C(x)||^2 / ||x||^2 over sampled inputs.

    Zero inputs are skipped and reported in ``skipped``.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    total = total_sq = 0.0
    used = skipped = 0
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        X = np.asarray(sampler(rng, n), dtype=np.float64)
        done += n
        nx = np.sum(X * X, axis=1)
        keep = nx > 0
        skipped += int(np.sum(~keep))
        X, nx = X[keep], nx[keep]
        if not len(X):
            continue
        C = compress_rows(spec, X, rng)
        ratio = np.sum((X - C) ** 2, axis=1) / nx
        total += float(np.sum(ratio))
        total_sq += float(np.sum(ratio**2))
        used += len(ratio)
    if used == 0:
        return FactorEstimate(math.nan, math.nan, 0, skipped)
    mean = total / used
    var = max(total_sq / used - mean**2, 0.0)
    return FactorEstimate(mean, math.sqrt(var / used), used, skipped)
