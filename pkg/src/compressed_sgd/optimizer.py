"""Perturbed compressed SGD with error feedback, and its hyperparameter planner.

The engine runs ``n`` independent replicas at once: states are (n, d)
arrays and every replica draws its own oracle, noise and compressor
randomness from the run's streams. One replica is an ordinary single run.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Callable

import numpy as np

from . import compressors as C
from .compressors import CompressorSpec, Kind
from .linalg import COMPRESSOR, NOISE, ORACLE, SeededRng, gaussian_vector
from .objectives import DomainError, StochasticOracle


# ---------------------------------------------------------------------------
# planner

@dataclass(frozen=True)
class PlannerConstants:
    """Hidden polylog factors of the parameter choice. ``c_I=None`` means
    ``4 ln(d T)``."""

    c_eta: float = 0.25
    c_I: float | None = None
    c_R: float = 0.5
    c_F: float = 0.05
    c_r: float = 1.0
    c_T: float = 1.0

    def __post_init__(self):
        for name in ("c_eta", "c_R", "c_F", "c_T"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.c_I is not None and not self.c_I > 0:
            raise ValueError("c_I must be positive")
        if not self.c_r >= 0:
            raise ValueError("c_r must be >= 0")


@dataclass(frozen=True)
class HyperParams:
    eps: float
    L: float
    rho: float
    sigma: float
    ell_tilde: float
    d: int
    alpha: int
    mu: float
    linear: bool
    f_max: float
    eta_sigma: float
    eta_mu: float
    eta: float
    I: float
    R: float
    F: float
    r: float
    T: int
    chi2: float
    constants: PlannerConstants = field(default_factory=PlannerConstants)

    @property
    def chi(self) -> float:
        return math.sqrt(self.chi2)

    @property
    def I_iters(self) -> int:
        return max(1, math.ceil(self.I))

    @property
    def descent_cap(self) -> float:
        return descent_step_cap(self.L, self.mu)

    def violations(self, rtol: float = 1e-12) -> list[str]:
        """Invariant violations of this parameter tuple (empty when consistent)."""
        c = self.constants
        out = []

        def close(a, b):
            return math.isclose(a, b, rel_tol=rtol, abs_tol=0.0) or (math.isinf(a) and math.isinf(b))

        if not self.eta <= self.descent_cap:
            out.append(f"eta={self.eta} exceeds 1/(4L) min(mu/sqrt(1-mu), 1)={self.descent_cap}")
        se = math.sqrt(self.rho * self.eps)
        c_I = self.I * self.eta * se
        if c.c_I is not None and not close(c_I, c.c_I):
            out.append("I != c_I / (eta sqrt(rho eps))")
        if not close(self.R, c.c_R * math.sqrt(self.eps / self.rho)):
            out.append("R != c_R sqrt(eps/rho)")
        if not close(self.F, c.c_F * math.sqrt(self.eps**3 / self.rho)):
            out.append("F != c_F sqrt(eps^3/rho)")
        if not close(self.r, c.c_r * self.eps / math.sqrt(self.L * self.eta)):
            out.append("r != c_r eps / sqrt(L eta)")
        if not close(self.chi2, self.sigma**2 + self.r**2):
            out.append("chi^2 != sigma^2 + r^2")
        return out

    def to_dict(self) -> dict:
        out = asdict(self)
        out["I_iters"] = self.I_iters
        return out


def descent_step_cap(L: float, mu: float) -> float:
    if mu >= 1.0:
        return 1.0 / (4.0 * L)
    return min(mu / math.sqrt(1.0 - mu), 1.0) / (4.0 * L)


def step_sizes(eps, L, rho, sigma, ell_tilde, d, mu, linear) -> tuple[float, float]:
    """(eta_sigma, eta_mu): the largest admissible steps for SGD and for the
    compression error."""
    eta_sigma = eps**2 / (L * (1 + d * sigma**2)) + min(
        eps**2 / (L * (1 + sigma**2)), math.sqrt(rho * eps) / ell_tilde**2
    )
    if mu >= 1.0:
        return eta_sigma, math.inf
    denom = math.sqrt(1 - mu) * L * sigma
    first = mu * eps / denom if denom > 0 else math.inf
    if linear:
        second = mu**2 * math.sqrt(rho * eps) / ((1 - mu) * L**2)
    else:
        second = mu**2 * math.sqrt(eps) / ((1 - mu) * L**2 * d)
    return eta_sigma, min(first, second)


def plan(eps: float, L: float, rho: float, sigma: float, ell_tilde: float, d: int,
         spec: CompressorSpec | None = None, *, lipschitz_sg: bool = True, f_max: float = 1.0,
         constants: PlannerConstants | None = None, mu: float | None = None,
         linear: bool | None = None, T_cap: int | None = None) -> HyperParams:
    """Step size, escape budget/radius/decrease, noise level and iteration
    budget for the given problem constants and compressor.

    ``mu``/``linear`` default to the compressor's; pass them to plan for a
    map without a contraction factor of its own (e.g. quantization).
    """
    c = constants or PlannerConstants()
    if not 0 < eps <= 1:
        raise ValueError("eps must lie in (0, 1]")
    if not (L > 0 and rho > 0 and ell_tilde > 0 and f_max > 0):
        raise ValueError("L, rho, ell_tilde and f_max must be positive")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if mu is None:
        mu = 1.0 if spec is None else spec.mu
    if linear is None:
        linear = True if spec is None else spec.linear
    if not 0 < mu <= 1:
        raise ValueError(f"mu must lie in (0, 1], got {mu}")

    eta_sigma, eta_mu = step_sizes(eps, L, rho, sigma, ell_tilde, d, mu, linear)
    eta = c.c_eta * min(eta_sigma, eta_mu)
    cap = descent_step_cap(L, mu)
    if eta >= cap:
        eta = 0.999 * cap
    T = math.ceil(c.c_T * f_max / (eps**2 * eta))
    if T_cap is not None:
        T = min(T, T_cap)
    c_I = c.c_I if c.c_I is not None else 4.0 * math.log(d * max(T, 1))
    se = math.sqrt(rho * eps)
    r = c.c_r * eps / math.sqrt(L * eta)
    return HyperParams(
        eps=eps, L=L, rho=rho, sigma=sigma, ell_tilde=ell_tilde, d=d,
        alpha=1 if lipschitz_sg else d, mu=mu, linear=linear, f_max=f_max,
        eta_sigma=eta_sigma, eta_mu=eta_mu, eta=eta,
        I=c_I / (eta * se), R=c.c_R * math.sqrt(eps / rho), F=c.c_F * math.sqrt(eps**3 / rho),
        r=r, T=T, chi2=sigma**2 + r**2, constants=replace(c, c_I=c_I),
    )


def _frac(x) -> Fraction:
    return x if isinstance(x, Fraction) else Fraction(str(x))


def randomk_size(d: int, eps, alpha: int) -> int:
    """k = ceil(d eps^(3/4) / sqrt(alpha)), clamped to [1, d], computed exactly.

    ``eps`` is read as the decimal it prints as; k is the least integer with
    k^4 alpha^2 >= d^4 eps^3.
    """
    e = _frac(eps)
    target = Fraction(d**4) * e**3 / alpha**2
    k = max(1, math.ceil(d * float(e) ** 0.75 / math.sqrt(alpha)) - 1)
    while Fraction(k**4) < target:
        k += 1
    while k > 1 and Fraction((k - 1) ** 4) >= target:
        k -= 1
    return min(k, d)


@dataclass(frozen=True)
class CommPlan:
    """Iteration and per-worker communication counts, up to hidden polylog
    factors, for RandomK against uncompressed SGD."""

    d: int
    eps: Fraction
    alpha: int
    k: int
    iters_uncompressed: float
    iters_randomk: float
    bits_uncompressed: float
    bits_randomk: float

    @property
    def mu(self) -> Fraction:
        return Fraction(self.k, self.d)

    @property
    def coordinate_ratio(self) -> Fraction:
        """d/k, exact."""
        return Fraction(self.d, self.k)

    @property
    def predicted_ratio(self) -> float:
        """sqrt(alpha) eps^(-3/4) times the rounding factor k_real/k."""
        k_real = self.d * float(self.eps) ** 0.75 / math.sqrt(self.alpha)
        return math.sqrt(self.alpha) * float(self.eps) ** -0.75 * (k_real / self.k)

    @property
    def bits_ratio(self) -> float:
        return self.bits_uncompressed / self.bits_randomk


def comm_plan(d: int, eps, alpha: int, value_bits: int = 64) -> CommPlan:
    """Iteration counts alpha/eps^4 (uncompressed) and
    alpha/eps^4 + sqrt(1-mu)/(mu eps^3) + (1-mu)/(mu^2 eps^2.5) (linear
    compressor), times per-round message size."""
    e = _frac(eps)
    k = randomk_size(d, e, alpha)
    ef = float(e)
    mu = k / d
    base = alpha / ef**4
    it_rk = base + math.sqrt(1 - mu) / (mu * ef**3) + (1 - mu) / (mu**2 * ef**2.5)
    return CommPlan(d, e, alpha, k, base, it_rk, base * d * value_bits, it_rk * k * value_bits)


# ---------------------------------------------------------------------------
# engine

class RunAborted(RuntimeError):
    """A run stopped early; ``trace`` holds everything recorded so far."""

    def __init__(self, reason: str, t: int, trace: "RunTrace | None" = None):
        super().__init__(f"run aborted at t={t}: {reason}")
        self.reason = reason
        self.t = t
        self.trace = trace


@dataclass
class Streams:
    oracle: SeededRng
    compressor: SeededRng
    noise: SeededRng

    @classmethod
    def make(cls, seed: int, worker: int = 0) -> "Streams":
        # compressor and noise streams are shared by every worker
        return cls(
            SeededRng.for_purpose(seed, ORACLE, worker),
            SeededRng.for_purpose(seed, COMPRESSOR),
            SeededRng.for_purpose(seed, NOISE),
        )


@dataclass
class OptimizerState:
    t: int
    x: np.ndarray
    e: np.ndarray
    t_prime: np.ndarray
    x_anchor: np.ndarray

    @classmethod
    def initial(cls, x0, replicas: int = 1) -> "OptimizerState":
        x0 = np.asarray(x0, dtype=np.float64)
        x = np.array(np.broadcast_to(x0, (replicas, x0.shape[-1])))
        return cls(0, x, np.zeros_like(x), np.zeros(replicas, dtype=np.int64), x.copy())

    @property
    def replicas(self) -> int:
        return self.x.shape[0]


@dataclass
class IterRecord:
    t: int
    grad: np.ndarray
    stoch_grad: np.ndarray
    xi: np.ndarray
    g: np.ndarray
    bits: np.ndarray


def corrected_iterate(state: OptimizerState, hp: HyperParams) -> np.ndarray:
    return state.x - hp.eta * state.e


def maybe_reset(state: OptimizerState, hp: HyperParams, reset_error: bool):
    """Error reset check at the top of an iteration.

    Returns ``(state', fired)`` with ``fired`` a boolean per replica.
    """
    n = state.replicas
    if not reset_error:
        return state, np.zeros(n, dtype=bool)
    y = state.x - hp.eta * state.e
    dist = np.linalg.norm(state.x_anchor - y, axis=1)
    fired = (state.t - state.t_prime > hp.I) | (dist > hp.R)
    if not fired.any():
        return state, fired
    f = fired[:, None]
    x = np.where(f, y, state.x)
    return OptimizerState(
        t=state.t,
        x=x,
        e=np.where(f, 0.0, state.e),
        t_prime=np.where(fired, state.t, state.t_prime),
        x_anchor=np.where(f, x, state.x_anchor),
    ), fired


def message_bits(spec: CompressorSpec, g: np.ndarray, value_bits: int = 64) -> np.ndarray:
    """Uplink cost of each row of ``g`` as one message."""
    if spec.kind is Kind.QUANTIZATION:
        base = C.message_cost_bits(spec, value_bits, 0)
        per = C.message_cost_bits(spec, value_bits, 1) - base
        return base + per * np.count_nonzero(g, axis=1).astype(np.int64)
    return np.full(g.shape[0], C.message_cost_bits(spec, value_bits), dtype=np.int64)


def draw_iteration(oracle: StochasticOracle, spec: CompressorSpec, hp: HyperParams,
                   streams: Streams, n: int, shared_theta: bool = False):
    """All randomness of one iteration: (oracle draw, xi, compressor draw)."""
    theta = oracle.draw(streams.oracle, n)
    xi = _noise(streams.noise, n, hp)
    theta_c = C.draw_theta(spec, streams.compressor, 1 if shared_theta else n)
    return theta, xi, theta_c


def _noise(rng: SeededRng, n: int, hp: HyperParams) -> np.ndarray:
    # per-coordinate variance r^2/d so that E||xi||^2 = r^2
    return gaussian_vector(rng, hp.d, hp.r / math.sqrt(hp.d), (n,))


def advance(x, e, grad, stoch_grad, xi, spec, theta_c, eta):
    """Deterministic part of one iteration; returns (x', e', g)."""
    u = e + stoch_grad + xi
    g = C.apply(spec, u, theta_c)
    return x - eta * g, u - g, g


def _bounded(*arrays) -> bool:
    # squared norms overflow long before the entries do, which catches blow-up early
    with np.errstate(over="ignore", invalid="ignore"):
        return all(math.isfinite(float(a.ravel() @ a.ravel())) for a in arrays)


def step(state: OptimizerState, oracle: StochasticOracle, spec: CompressorSpec, hp: HyperParams,
         streams: Streams, value_bits: int = 64):
    """One iteration (without the reset check). Returns (state', IterRecord)."""
    n = state.replicas
    grad = oracle.objective.gradient(state.x)
    theta, xi, theta_c = draw_iteration(oracle, spec, hp, streams, n)
    stoch = oracle.apply(grad, theta)
    x, e, g = advance(state.x, state.e, grad, stoch, xi, spec, theta_c, hp.eta)
    if not _bounded(x, e):
        raise RunAborted("non-finite iterate or error accumulator", state.t)
    new = OptimizerState(state.t + 1, x, e, state.t_prime, state.x_anchor)
    return new, IterRecord(state.t, grad, stoch, xi, g, message_bits(spec, g, value_bits))


# ---------------------------------------------------------------------------
# traces

TRACE_COLUMNS = ("t", "f", "grad_norm", "err_norm", "y_drift", "bits", "reset")


@dataclass
class Checkpoint:
    t: int
    replica: int
    x: np.ndarray


@dataclass
class RunTrace:
    """Per-iteration records; 2-D arrays are (records, replicas)."""

    t: np.ndarray
    f: np.ndarray
    f_y: np.ndarray
    grad_norm: np.ndarray
    err_norm: np.ndarray
    y_drift: np.ndarray
    bits: np.ndarray
    reset: np.ndarray
    checkpoints: list[Checkpoint]
    hp: HyperParams
    reset_error: bool
    spec: CompressorSpec
    vectors: dict[str, np.ndarray] | None = None
    stopped_at: int | None = None
    final_x: np.ndarray | None = None

    @property
    def replicas(self) -> int:
        return self.f.shape[1]

    @property
    def total_bits(self) -> int:
        return int(self.bits.sum())

    def checkpoints_of(self, replica: int) -> list[Checkpoint]:
        return [c for c in self.checkpoints if c.replica == replica]

    def to_csv(self, path) -> None:
        multi = self.replicas > 1
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow((("replica",) if multi else ()) + TRACE_COLUMNS)
            for j in range(self.replicas):
                for i, t in enumerate(self.t):
                    row = [int(t), _fmt(self.f[i, j]), _fmt(self.grad_norm[i, j]), _fmt(self.err_norm[i, j]),
                           _fmt(self.y_drift[i, j]), int(self.bits[i, j]), int(self.reset[i, j])]
                    w.writerow(([j] if multi else []) + row)

    def summary(self) -> dict:
        return {
            "records": int(self.t.size),
            "replicas": self.replicas,
            "last_t": int(self.t[-1]),
            "stopped_at": self.stopped_at,
            "total_bits": self.total_bits,
            "resets": int(self.reset.sum()),
            "final_f": [float(v) for v in self.f[-1]],
            "final_grad_norm": [float(v) for v in self.grad_norm[-1]],
            "checkpoints": [{"t": c.t, "replica": c.replica, "x": [float(v) for v in c.x]}
                            for c in self.checkpoints],
            "compressor": {"kind": self.spec.kind.value, "d": self.spec.d, "k": self.spec.k, "s": self.spec.s},
            "reset_error": self.reset_error,
            "planner": self.hp.to_dict(),
        }

    def write_summary(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.summary(), fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")


def _fmt(v: float) -> str:
    return format(float(v), ".17g")


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, Kind):
        return o.value
    raise TypeError(type(o))


class _Recorder:
    def __init__(self, T: int, n: int, d: int, every: int, keep_vectors: bool):
        self.every = every
        self.n = n
        self.rows: dict[str, list] = {k: [] for k in ("t", "f", "f_y", "grad_norm", "err_norm", "y_drift",
                                                      "bits", "reset")}
        self.keep = keep_vectors
        if keep_vectors:
            self.vec = {"x": np.zeros((T + 1, n, d)), "e": np.zeros((T + 1, n, d)),
                        "h": np.zeros((T, n, d)), "y": np.zeros((T + 1, n, d))}

    @property
    def last_f(self) -> np.ndarray:
        return self.rows["f"][-1]

    def add(self, t, f, f_y, grad_norm, err_norm, y_drift, bits, reset):
        r = self.rows
        r["t"].append(t)
        r["f"].append(np.asarray(f, dtype=np.float64).reshape(self.n))
        r["f_y"].append(np.asarray(f_y, dtype=np.float64).reshape(self.n))
        r["grad_norm"].append(grad_norm)
        r["err_norm"].append(err_norm)
        r["y_drift"].append(y_drift)
        r["bits"].append(np.asarray(bits, dtype=np.int64))
        r["reset"].append(np.asarray(reset, dtype=bool))

    def trace(self, **kw) -> RunTrace:
        r = self.rows
        n = self.n

        def stack(name, dtype):
            if not r[name]:
                return np.zeros((0, n), dtype=dtype)
            return np.array(r[name], dtype=dtype).reshape(len(r[name]), n)

        vectors = None
        if self.keep:
            last = r["t"][-1] if r["t"] else 0
            vectors = {k: v[: last + (0 if k == "h" else 1)] for k, v in self.vec.items()}
        return RunTrace(t=np.array(r["t"], dtype=np.int64), f=stack("f", np.float64), f_y=stack("f_y", np.float64),
                        grad_norm=stack("grad_norm", np.float64), err_norm=stack("err_norm", np.float64),
                        y_drift=stack("y_drift", np.float64), bits=stack("bits", np.int64),
                        reset=stack("reset", bool), vectors=vectors, **kw)


def run(oracle: StochasticOracle, spec: CompressorSpec, hp: HyperParams, x0, seed: int = 0,
        reset_error: bool = False, *, replicas: int = 1, T: int | None = None,
        record_every: int = 1, keep_vectors: bool = False,
        stop: Callable[[int, np.ndarray], bool] | None = None,
        checkpoint_every: int | None = None, value_bits: int = 64) -> RunTrace:
    """Run the algorithm for ``T`` iterations (default ``hp.T``) on ``replicas``
    independent copies started at ``x0``.

    Checkpoints are the pre-reset iterates at reset events when
    ``reset_error`` is set, otherwise every ``checkpoint_every`` (default
    ``hp.I_iters``) iterations starting at t = 0. ``stop(t, f_row)`` is
    consulted after each recorded row and ends the run early when true.
    """
    T = hp.T if T is None else T
    obj = oracle.objective
    if spec.d != obj.d or hp.d != obj.d:
        raise ValueError("dimension mismatch between objective, compressor and plan")
    streams = Streams.make(seed)
    state = OptimizerState.initial(x0, replicas)
    n, d = state.x.shape
    obj.check_domain(state.x)
    every_ck = checkpoint_every or hp.I_iters
    reset_cost = spec.d * value_bits
    rec = _Recorder(T, n, d, record_every, keep_vectors)
    checkpoints: list[Checkpoint] = []
    y0 = state.x.copy()
    eta = hp.eta
    stopped = None

    def finish():
        return rec.trace(checkpoints=checkpoints, hp=hp, reset_error=reset_error, spec=spec,
                         stopped_at=stopped, final_x=state.x.copy())

    t = 0
    try:
        while True:
            pre_x = state.x
            state, fired = maybe_reset(state, hp, reset_error)
            if reset_error:
                for j in np.flatnonzero(fired):
                    checkpoints.append(Checkpoint(t, int(j), pre_x[j].copy()))
            elif t % every_ck == 0:
                for j in range(n):
                    checkpoints.append(Checkpoint(t, j, state.x[j].copy()))
            if t == T:
                grad = obj.gradient(state.x)
                bits = np.zeros(n, dtype=np.int64)
            else:
                nxt, it = step(state, oracle, spec, hp, streams, value_bits)
                # a reset uploads the accumulator once, densely
                grad, bits = it.grad, it.bits + fired * reset_cost
            if t % record_every == 0 or t == T:
                y = state.x - eta * state.e
                rec.add(t, obj.value(state.x), obj.value(y), np.linalg.norm(grad, axis=1),
                        np.linalg.norm(state.e, axis=1), np.linalg.norm(y - y0, axis=1), bits, fired)
                if stop is not None and t < T and stop(t, rec.last_f):
                    stopped = t
                    break
            if keep_vectors:
                rec.vec["x"][t], rec.vec["e"][t], rec.vec["y"][t] = state.x, state.e, state.x - eta * state.e
                if t < T:
                    rec.vec["h"][t] = it.stoch_grad + it.xi
            if t == T:
                break
            state = nxt
            t += 1
    except RunAborted as exc:
        exc.trace = finish()
        raise
    except DomainError as exc:
        raise RunAborted(str(exc), t, finish()) from exc
    return finish()
