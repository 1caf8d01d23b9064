"""Synthetic test objectives with exact derivatives, and stochastic oracles.

All value/gradient methods accept a single point of shape (d,) or a batch of
shape (n, d). Hessians are per point.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .linalg import SeededRng, check_symmetric, gershgorin_bound, min_eigenpair, spectral_norm


class DomainError(ValueError):
    pass


DEFAULT_BOX = 10.0


def _check_box(X: np.ndarray, box: float):
    m = np.max(np.abs(X), initial=0.0)
    if m <= box:
        return
    if not np.all(np.isfinite(X)):
        raise DomainError("point has non-finite coordinates")
    raise DomainError(f"point leaves the domain box ||x||_inf <= {box}")


@dataclass(frozen=True)
class Quadratic:
    """f(x) = 1/2 x^T H x."""

    H: np.ndarray = field(repr=False)

    def __post_init__(self):
        object.__setattr__(self, "H", check_symmetric(self.H))

    @property
    def d(self) -> int:
        return self.H.shape[0]

    @property
    def f_lower(self) -> float:
        lam, _ = min_eigenpair(self.H, gershgorin_bound(self.H), tol=1e-12)
        return 0.0 if lam >= -1e-12 else -math.inf

    def check_domain(self, X):
        if not np.all(np.isfinite(X)):
            raise DomainError("point has non-finite coordinates")

    def value(self, X):
        X = np.asarray(X, dtype=np.float64)
        self.check_domain(X)
        return 0.5 * np.sum((X @ self.H) * X, axis=-1)

    def gradient(self, X):
        X = np.asarray(X, dtype=np.float64)
        self.check_domain(X)
        return X @ self.H

    def hessian(self, x):
        self.check_domain(np.asarray(x))
        return self.H.copy()


@dataclass(frozen=True)
class CubicRegQuadratic:
    """f(x) = 1/2 x^T H x + rho/6 ||x||^3."""

    H: np.ndarray = field(repr=False)
    rho: float = 1.0
    box: float = DEFAULT_BOX

    def __post_init__(self):
        object.__setattr__(self, "H", check_symmetric(self.H))
        if self.rho <= 0:
            raise ValueError("rho must be positive")

    @property
    def d(self) -> int:
        return self.H.shape[0]

    @property
    def f_lower(self) -> float:
        lam, _ = min_eigenpair(self.H, gershgorin_bound(self.H), tol=1e-12)
        gamma = max(-lam, 0.0)
        # minimum of -gamma s^2 / 2 + rho s^3 / 6 over s >= 0
        return -2.0 * gamma**3 / (3.0 * self.rho**2)

    def check_domain(self, X):
        _check_box(X, self.box)

    def value(self, X):
        X = np.asarray(X, dtype=np.float64)
        self.check_domain(X)
        n = np.linalg.norm(X, axis=-1)
        return 0.5 * np.sum((X @ self.H) * X, axis=-1) + self.rho / 6.0 * n**3

    def gradient(self, X):
        X = np.asarray(X, dtype=np.float64)
        self.check_domain(X)
        n = np.linalg.norm(X, axis=-1, keepdims=True)
        return X @ self.H + 0.5 * self.rho * n * X

    def hessian(self, x):
        x = np.asarray(x, dtype=np.float64)
        self.check_domain(x)
        n = float(np.linalg.norm(x))
        out = self.H + 0.5 * self.rho * n * np.eye(self.d)
        if n > 0:
            out = out + 0.5 * self.rho * np.outer(x, x) / n
        return out


@dataclass(frozen=True)
class DoubleWell:
    """f(x) = sum_i x_i^4/4 - x_i^2/2: strict saddle at 0, minima at +-1."""

    dim: int
    box: float = DEFAULT_BOX

    @property
    def d(self) -> int:
        return self.dim

    @property
    def f_lower(self) -> float:
        return -0.25 * self.dim

    def check_domain(self, X):
        _check_box(X, self.box)

    def value(self, X):
        X = np.asarray(X, dtype=np.float64)
        self.check_domain(X)
        X2 = X * X
        return np.sum(0.25 * X2 * X2 - 0.5 * X2, axis=-1)

    def gradient(self, X):
        X = np.asarray(X, dtype=np.float64)
        self.check_domain(X)
        return X * X * X - X

    def hessian(self, x):
        x = np.asarray(x, dtype=np.float64)
        self.check_domain(x)
        return np.diag(3.0 * x * x - 1.0)


Objective = Quadratic | CubicRegQuadratic | DoubleWell


def rotated_spectrum(eigenvalues, rotation_seed: int | None = None) -> np.ndarray:
    """Symmetric matrix with the given spectrum, optionally in a random basis."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if rotation_seed is None:
        return np.diag(lam)
    Z = np.random.default_rng(rotation_seed).standard_normal((lam.size, lam.size))
    Q, R = np.linalg.qr(Z)
    Q = Q * np.sign(np.diag(R))
    H = (Q * lam) @ Q.T
    return 0.5 * (H + H.T)


def evaluate(obj, x):
    """Exact (f, grad, hess) at a single point."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (obj.d,):
        raise ValueError(f"dimension mismatch: expected ({obj.d},), got {x.shape}")
    return float(obj.value(x)), obj.gradient(x), obj.hessian(x)


class Constants(NamedTuple):
    L: float
    rho: float
    f_max: float


def certified_constants(obj, domain_radius: float) -> Constants:
    """Closed-form smoothness, Hessian-Lipschitz and range bounds on the box
    ``||x||_inf <= domain_radius``."""
    if domain_radius <= 0:
        raise ValueError("domain radius must be positive")
    B = domain_radius
    if isinstance(obj, DoubleWell):
        L = max(3.0 * B * B - 1.0, 2.0)
        g_hi = max(0.0, B**4 / 4 - B**2 / 2)
        g_lo = -0.25 if B >= 1 else B**4 / 4 - B**2 / 2
        return Constants(L, 6.0 * B, obj.dim * (g_hi - g_lo))
    h = spectral_norm(obj.H)
    r2 = obj.d * B * B
    if isinstance(obj, Quadratic):
        return Constants(h, 0.0, h * r2)
    # the cubic term's Hessian has norm rho ||x||_2 <= rho sqrt(d) B
    return Constants(h + obj.rho * math.sqrt(r2), obj.rho, h * r2 + obj.rho / 3.0 * r2**1.5)


# ---------------------------------------------------------------------------
# stochastic oracles

class Noise(str, enum.Enum):
    ADDITIVE_GAUSSIAN = "additive_gaussian"
    COORDINATE_SAMPLING = "coordinate_sampling"


@dataclass(frozen=True)
class StochasticOracle:
    """Unbiased stochastic gradients of ``objective``.

    AdditiveGaussian adds N(0, sigma^2/d) per coordinate, so the total
    variance is sigma^2 and every draw is L-Lipschitz in x. CoordinateSampling
    returns d * df/dx_j * e_j for a uniform j; its per-draw Lipschitz
    constant is d*L, and ``sigma`` is the caller's bound on its variance
    (d - 1)||grad f||^2 over the region of interest.
    """

    objective: object
    noise: Noise = Noise.ADDITIVE_GAUSSIAN
    sigma: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "noise", Noise(self.noise))
        if not math.isfinite(self.sigma) or self.sigma < 0:
            raise ValueError("sigma must be finite and >= 0")

    @property
    def d(self) -> int:
        return self.objective.d

    @property
    def lipschitz(self) -> bool:
        return self.noise is Noise.ADDITIVE_GAUSSIAN

    def ell_tilde(self, L: float) -> float:
        return L if self.lipschitz else self.d * L

    def draw(self, rng: SeededRng, n: int = 1):
        if self.noise is Noise.ADDITIVE_GAUSSIAN:
            return None if self.sigma == 0 else rng.normal((n, self.d))
        return rng.integers(0, self.d, size=n)

    def apply(self, grad: np.ndarray, theta) -> np.ndarray:
        """Turn exact gradients (n, d) into stochastic ones for draw ``theta``."""
        if self.noise is Noise.ADDITIVE_GAUSSIAN:
            if theta is None:
                return grad.copy()
            return grad + (self.sigma / math.sqrt(self.d)) * theta
        out = np.zeros_like(grad)
        rows = np.arange(grad.shape[0])
        out[rows, theta] = self.d * grad[rows, theta]
        return out


def sample_gradient(oracle: StochasticOracle, x, rng: SeededRng) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (oracle.d,):
        raise ValueError(f"dimension mismatch: expected ({oracle.d},), got {x.shape}")
    g = oracle.objective.gradient(x)[None, :]
    return oracle.apply(g, oracle.draw(rng, 1))[0]
