"""Dense helpers shared by every module: vectors, seeded streams, extreme
eigenpairs and finite differences.

Parameter vectors are plain 1-D float64 numpy arrays; batched code uses the
last axis as the coordinate axis.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

# stream purposes; combined with a worker index to form a stream id
ORACLE = 1
COMPRESSOR = 2
NOISE = 3
INIT = 4
SAMPLER = 5


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


def as_param_vector(x, dim: int | None = None) -> np.ndarray:
    """Validate and return ``x`` as a finite float64 vector."""
    v = np.asarray(x, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError(f"expected a non-empty 1-D vector, got shape {v.shape}")
    if dim is not None and v.size != dim:
        raise ValueError(f"dimension mismatch: expected {dim}, got {v.size}")
    if not np.all(np.isfinite(v)):
        raise ValueError("vector has non-finite entries")
    return v


def stream_id(purpose: int, worker: int = 0) -> int:
    return (purpose << 32) | worker


@dataclass
class SeededRng:
    """Counter-based (Philox) generator keyed by ``(seed, stream)``.

    Two instances built from the same pair produce the same draws, which is
    how workers reproduce shared compressor randomness without talking.
    """

    seed: int
    stream: int = 0
    generator: np.random.Generator = field(init=False, repr=False)

    def __post_init__(self):
        if not (0 <= self.seed < 2**64 and 0 <= self.stream < 2**64):
            raise ValueError("seed and stream must be 64-bit unsigned integers")
        ss = np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream,))
        self.generator = np.random.Generator(np.random.Philox(ss))

    @classmethod
    def for_purpose(cls, seed: int, purpose: int, worker: int = 0) -> "SeededRng":
        return cls(seed, stream_id(purpose, worker))

    def normal(self, shape) -> np.ndarray:
        return self.generator.standard_normal(shape)

    def uniform(self, shape) -> np.ndarray:
        return self.generator.random(shape)

    def integers(self, low, high, size=None) -> np.ndarray:
        return self.generator.integers(low, high, size=size)


def gaussian_vector(rng: SeededRng, d: int, per_coord_std: float, batch: tuple = ()) -> np.ndarray:
    if d < 1:
        raise ValueError("d must be positive")
    if not math.isfinite(per_coord_std) or per_coord_std < 0:
        raise ValueError(f"per-coordinate std must be finite and >= 0, got {per_coord_std}")
    shape = (*batch, d)
    if per_coord_std == 0:
        # still consume the stream so draw positions do not depend on the std
        rng.normal(shape)
        return np.zeros(shape)
    return per_coord_std * rng.normal(shape)


def check_symmetric(H: np.ndarray) -> np.ndarray:
    H = np.asarray(H, dtype=np.float64)
    if H.ndim != 2 or H.shape[0] != H.shape[1]:
        raise ValueError(f"expected a square matrix, got shape {H.shape}")
    scale = float(np.max(np.abs(H))) if H.size else 0.0
    if np.max(np.abs(H - H.T), initial=0.0) > 1e-12 * scale:
        raise ValueError("matrix is not symmetric")
    return H


def gershgorin_bound(H: np.ndarray) -> float:
    """Upper bound on the spectral radius of ``H``."""
    return float(np.max(np.sum(np.abs(H), axis=1)))


def _start_vector(d: int) -> np.ndarray:
    v = np.random.default_rng(0x5EED).standard_normal(d)
    return v / np.linalg.norm(v)


def min_eigenpair(H, shift: float, tol: float = 1e-10, max_iter: int = 100_000):
    """Smallest eigenpair of a symmetric matrix by power iteration on
    ``shift*I - H``.

    ``shift`` must upper-bound the largest eigenvalue of ``H``; then the
    dominant eigenvector of the shifted matrix is the one we want. Stops once
    ``||H v - lam v|| <= tol * (|lam| + 1)``.
    """
    H = check_symmetric(H)
    d = H.shape[0]
    if tol <= 0 or max_iter < 1:
        raise ValueError("tol and max_iter must be positive")
    M = shift * np.eye(d) - H
    v = _start_vector(d)
    residual = math.inf
    for _ in range(max_iter):
        Hv = H @ v
        lam = float(v @ Hv)
        residual = float(np.linalg.norm(Hv - lam * v))
        if residual <= tol * (abs(lam) + 1.0):
            return lam, v
        w = M @ v
        n = np.linalg.norm(w)
        if n == 0.0:
            # v lies in the null space of shift*I - H, so H v = shift v
            return float(shift), v
        v = w / n
    raise ConvergenceError("power iteration did not converge", residual)


def spectral_norm(H, tol: float = 1e-12, max_iter: int = 100_000) -> float:
    """||H||_2 of a symmetric matrix via power iteration on H^2."""
    H = check_symmetric(H)
    scale = float(np.max(np.abs(H), initial=0.0))
    if scale == 0.0:
        return 0.0
    # work on H/scale so tiny or huge entries do not under- or overflow in H^2
    H2 = (H / scale) @ (H / scale)
    v = _start_vector(H.shape[0])
    est = 0.0
    for _ in range(max_iter):
        w = H2 @ v
        new = float(np.linalg.norm(w))
        v = w / new
        if abs(new - est) <= tol * new:
            return scale * math.sqrt(new)
        est = new
    raise ConvergenceError("spectral norm iteration did not converge", abs(new - est))


def fd_gradient(f, x, h: float = 1e-5) -> np.ndarray:
    """Central differences with per-coordinate step ``h * (1 + |x_i|)``."""
    if h <= 0:
        raise ValueError("h must be positive")
    x = as_param_vector(x)
    g = np.empty_like(x)
    for i in range(x.size):
        hi = h * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += hi
        xm[i] -= hi
        fp, fm = float(f(xp)), float(f(xm))
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise ValueError(f"non-finite objective value near coordinate {i}")
        g[i] = (fp - fm) / (xp[i] - xm[i])
    return g


def fd_jacobian(grad, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference Jacobian of a vector field, one column per coordinate."""
    x = as_param_vector(x)
    cols = []
    for i in range(x.size):
        hi = h * (1.0 + abs(x[i]))
        xp = x.copy()
        xm = x.copy()
        xp[i] += hi
        xm[i] -= hi
        cols.append((np.asarray(grad(xp)) - np.asarray(grad(xm))) / (xp[i] - xm[i]))
    return np.stack(cols, axis=1)
