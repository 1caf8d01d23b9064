"""Stationarity certificates, coupled trajectories and empirical checks of
the convergence lemmas.

Most checks take seed-indexed arrays (records, seeds) produced by
``optimizer.run`` with one replica per seed, and return small report
objects with a worst-case slack rather than raising.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy import stats

from . import compressors as C
from .compressors import CompressorSpec
from .linalg import ConvergenceError, gershgorin_bound, min_eigenpair
from .objectives import StochasticOracle
from .optimizer import HyperParams, OptimizerState, RunTrace, Streams, advance, draw_iteration, maybe_reset


# ---------------------------------------------------------------------------
# stationarity

@dataclass(frozen=True)
class StationarityReport:
    point: np.ndarray = field(repr=False)
    grad_norm: float
    lambda_min: float
    eps: float
    rho: float

    @property
    def is_fosp(self) -> bool:
        return self.grad_norm <= self.eps

    @property
    def is_sosp(self) -> bool:
        return self.is_fosp and self.lambda_min >= -math.sqrt(self.rho * self.eps)


def certify(obj, x, eps: float, hp: HyperParams) -> StationarityReport:
    """Gradient norm and smallest Hessian eigenvalue at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    grad = obj.gradient(x)
    H = obj.hessian(x)
    # both bound lambda_max; the tighter shift speeds up clustered spectra
    shift = min(hp.L, gershgorin_bound(H))
    try:
        lam, _ = min_eigenpair(H, shift, tol=1e-8 * hp.L)
    except ConvergenceError:
        # a near-degenerate bottom pair stalls power iteration; the dense solver does not
        lam = float(np.linalg.eigvalsh(H)[0])
    return StationarityReport(x.copy(), float(np.linalg.norm(grad)), float(lam), eps, hp.rho)


def fosp_fraction(trace: RunTrace, eps: float) -> np.ndarray:
    """Per replica, the share of recorded iterates with ||grad f|| <= eps."""
    return np.mean(trace.grad_norm <= eps, axis=0)


def sosp_fraction(checkpoints, obj, eps: float, hp: HyperParams) -> float:
    pts = [getattr(c, "x", c) for c in checkpoints]
    if not pts:
        raise ValueError("checkpoint list is empty")
    return sum(certify(obj, p, eps, hp).is_sosp for p in pts) / len(pts)


def best_checkpoint(checkpoints, obj, eps: float, hp: HyperParams) -> StationarityReport:
    """The checkpoint to report as the output point: an SOSP with the smallest
    gradient norm if any checkpoint certifies, otherwise the smallest gradient
    norm overall."""
    reports = certify_many(obj, [getattr(c, "x", c) for c in checkpoints], eps, hp)
    if not reports:
        raise ValueError("checkpoint list is empty")
    pool = [r for r in reports if r.is_sosp] or reports
    return min(pool, key=lambda r: r.grad_norm)


# ---------------------------------------------------------------------------
# beta_t

def beta(t, a: float) -> np.ndarray:
    """beta_t = sqrt(sum_{i<t} (1+a)^(2i)) in floating point."""
    t = np.asarray(t, dtype=np.float64)
    q = 2.0 * math.log1p(a)
    return np.sqrt(np.expm1(q * t) / math.expm1(q))


@dataclass(frozen=True)
class BetaCheck:
    a: Fraction
    t_max: int
    recurrence_ok: bool
    upper_ok: bool
    lower_ok: bool
    lower_from: int
    first_failure: int | None

    @property
    def ok(self) -> bool:
        return self.recurrence_ok and self.upper_ok and self.lower_ok


def beta_bounds_exact(a, t_max: int) -> BetaCheck:
    """Both bounds on beta_t checked in exact integer arithmetic for t <= t_max.

    With a = p/m and u = m + p, S_t = m^(2(t-1)) beta_t^2 satisfies
    S_{t+1} = m^2 S_t + u^(2t). The upper bound reads 2pm S_t <= u^(2t) and
    the lower bound (t >= 2/a) reads 6pm S_t >= u^(2t).
    """
    a = a if isinstance(a, Fraction) else Fraction(str(a))
    if not 0 < a <= 1:
        raise ValueError("a must lie in (0, 1]")
    p, m = a.numerator, a.denominator
    u = m + p
    lower_from = math.ceil(2 / a)
    upper_ok = lower_ok = recurrence_ok = True
    first = None
    # t = 1: S = 1, beta^2 = 1
    S, u2t, m2, u2 = 1, u * u, m * m, u * u
    for t in range(1, t_max + 1):
        if 2 * p * m * S > u2t:
            upper_ok = False
            first = first if first is not None else t
        if t >= lower_from and 6 * p * m * S < u2t:
            lower_ok = False
            first = first if first is not None else t
        S, u2t = m2 * S + u2t, u2t * u2
    # closed form at t_max + 1 cross-checks the recurrence
    t = t_max + 1
    if S * (u2 - m2) != u ** (2 * t) - m ** (2 * t):
        recurrence_ok = False
    return BetaCheck(a, t_max, recurrence_ok, upper_ok, lower_ok, lower_from, first)


# ---------------------------------------------------------------------------
# coupling

class NotASaddle(ValueError):
    pass


def reflect(xi: np.ndarray, v1: np.ndarray) -> np.ndarray:
    """xi - 2 <v1, xi> v1, row-wise."""
    return xi - 2.0 * (xi @ v1)[..., None] * v1


@dataclass
class CouplingResult:
    """Paired runs; 2-D arrays are (T+1, seeds)."""

    v1: np.ndarray
    gamma: float
    eta: float
    xhat_norm: np.ndarray
    yhat_norm: np.ndarray
    proj: np.ndarray
    f_x: np.ndarray
    f_xp: np.ndarray
    escaped: np.ndarray
    escaped_prime: np.ndarray
    bookkeeping_residual: float

    @property
    def T(self) -> int:
        return self.proj.shape[0] - 1

    @property
    def beta(self) -> np.ndarray:
        return beta(np.arange(self.T + 1), self.eta * self.gamma)

    def to_csv(self, path) -> None:
        rms_p = np.sqrt(np.mean(self.proj**2, axis=1))
        cols = np.column_stack([np.arange(self.T + 1), self.xhat_norm.mean(axis=1), self.yhat_norm.mean(axis=1),
                                rms_p, self.f_x.mean(axis=1), self.f_xp.mean(axis=1), self.beta])
        header = "t,xhat_norm_mean,yhat_norm_mean,proj_rms,f_mean,f_prime_mean,beta"
        np.savetxt(path, cols, delimiter=",", header=header, comments="", fmt="%.17g")


def coupling_experiment(obj, oracle: StochasticOracle, spec: CompressorSpec, hp: HyperParams, x0,
                        seeds: int, *, T: int | None = None, seed: int = 0,
                        reset_error: bool = False) -> CouplingResult:
    """Run the coupled pair (x, x') from the saddle ``x0`` on ``seeds`` replicas.

    Both sequences share the oracle and compressor draws; the artificial
    noise of x' is reflected along the most negative Hessian direction.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    H = obj.hessian(x0)
    lam, v1 = min_eigenpair(H, max(hp.L, gershgorin_bound(H)), tol=1e-12)
    if not lam < -0.5 * math.sqrt(hp.rho * hp.eps):
        raise NotASaddle(f"lambda_min={lam} is not below -sqrt(rho eps)/2")
    T = hp.I_iters if T is None else T
    n = seeds
    streams = Streams.make(seed)
    a = OptimizerState.initial(x0, n)
    b = OptimizerState.initial(x0, n)
    shape = (T + 1, n)
    out = {k: np.zeros(shape) for k in ("xhat", "yhat", "proj", "f", "fp")}
    drift = np.zeros(n)
    drift_p = np.zeros(n)
    worst = 0.0
    eta = hp.eta
    for t in range(T + 1):
        a, _ = maybe_reset(a, hp, reset_error)
        b, _ = maybe_reset(b, hp, reset_error)
        y, yp = a.x - eta * a.e, b.x - eta * b.e
        xh, eh = b.x - a.x, b.e - a.e
        yh = yp - y
        worst = max(worst, float(np.max(np.abs(yh - (xh - eta * eh)), initial=0.0)))
        out["xhat"][t] = np.linalg.norm(xh, axis=1)
        out["yhat"][t] = np.linalg.norm(yh, axis=1)
        out["proj"][t] = yh @ v1
        out["f"][t] = obj.value(a.x)
        out["fp"][t] = obj.value(b.x)
        drift = np.maximum(drift, np.linalg.norm(y - x0, axis=1))
        drift_p = np.maximum(drift_p, np.linalg.norm(yp - x0, axis=1))
        if t == T:
            break
        theta, xi, theta_c = draw_iteration(oracle, spec, hp, streams, n)
        ga, gb = obj.gradient(a.x), obj.gradient(b.x)
        xa, ea, _ = advance(a.x, a.e, ga, oracle.apply(ga, theta), xi, spec, theta_c, eta)
        xb, eb, _ = advance(b.x, b.e, gb, oracle.apply(gb, theta), reflect(xi, v1), spec, theta_c, eta)
        a = OptimizerState(t + 1, xa, ea, a.t_prime, a.x_anchor)
        b = OptimizerState(t + 1, xb, eb, b.t_prime, b.x_anchor)
    return CouplingResult(v1=v1, gamma=-lam, eta=eta, xhat_norm=out["xhat"], yhat_norm=out["yhat"],
                          proj=out["proj"], f_x=out["f"], f_xp=out["fp"], escaped=drift > hp.R,
                          escaped_prime=drift_p > hp.R, bookkeeping_residual=worst)


@dataclass(frozen=True)
class GrowthFit:
    rate: float
    expected: float
    t_start: int
    t_end: int

    @property
    def rel_error(self) -> float:
        return abs(self.rate - self.expected) / self.expected


def fit_growth(res: CouplingResult, R: float, t_start: int | None = None) -> GrowthFit:
    """Least-squares slope of ln RMS<v1, yhat_t> from ``t_start`` (default
    2/(eta gamma)) until the RMS of ||yhat_t|| first reaches ``R``."""
    a = res.eta * res.gamma
    t0 = math.ceil(2 / a) if t_start is None else t_start
    rms_norm = np.sqrt(np.mean(res.yhat_norm**2, axis=1))
    hit = np.flatnonzero(rms_norm >= R)
    t1 = int(hit[0]) if hit.size else res.T
    if t1 - t0 < 2:
        raise ValueError(f"growth window [{t0}, {t1}) is too short")
    t = np.arange(t0, t1)
    rms = np.sqrt(np.mean(res.proj[t0:t1] ** 2, axis=1))
    slope = np.polyfit(t, np.log(rms), 1)[0]
    return GrowthFit(float(slope), math.log1p(a), t0, t1)


@dataclass(frozen=True)
class SameDistribution:
    times: np.ndarray
    mean_z: np.ndarray
    var_z: np.ndarray
    z_limit: float
    ks_pvalue: float
    ks_level: float

    @property
    def moments_ok(self) -> bool:
        return bool(np.all(np.abs(self.mean_z) <= self.z_limit) and np.all(np.abs(self.var_z) <= self.z_limit))

    @property
    def ok(self) -> bool:
        return self.moments_ok and self.ks_pvalue >= self.ks_level


def _paired_z(a: np.ndarray, b: np.ndarray) -> float:
    d = a - b
    se = d.std(ddof=1) / math.sqrt(d.size)
    if se == 0:
        return 0.0 if d.mean() == 0 else math.inf
    return float(d.mean() / se)


def same_distribution_test(f_x: np.ndarray, f_xp: np.ndarray, points: int = 20,
                           ks_level: float = 0.01, z: float = 3.0) -> SameDistribution:
    """Compare f(x_t) and f(x'_t) over seeds (arrays are (T+1, seeds)).

    Means and centred second moments are compared at ``points`` evenly
    spaced times with paired z statistics; the per-time limit is the
    Bonferroni split of a single two-sided ``z``-sigma test, so the whole
    family has the false-alarm rate of one such test. The KS test uses x
    from the first half of the seeds and x' from the second half, which
    keeps the two samples independent.
    """
    T = f_x.shape[0] - 1
    n = f_x.shape[1]
    if n < 4:
        raise ValueError("need at least four seeds")
    times = np.unique(np.linspace(1, T, points).round().astype(int))
    mz, vz = [], []
    for t in times:
        a, b = f_x[t], f_xp[t]
        mz.append(_paired_z(a, b))
        vz.append(_paired_z((a - a.mean()) ** 2, (b - b.mean()) ** 2))
    tests = 2 * times.size
    z_limit = float(stats.norm.isf(stats.norm.sf(z) / tests))
    h = n // 2
    p = float(stats.ks_2samp(f_x[-1, :h], f_xp[-1, h:]).pvalue)
    return SameDistribution(times, np.array(mz), np.array(vz), z_limit, p, ks_level)


# ---------------------------------------------------------------------------
# lemma monitors

@dataclass(frozen=True)
class SlackReport:
    """``slack = rhs - lhs`` per time; a check passes when every slack is at
    least ``-band`` (the Monte-Carlo allowance)."""

    slack: np.ndarray
    band: np.ndarray

    @property
    def worst(self) -> float:
        return float(np.min(self.slack + self.band, initial=math.inf))

    @property
    def ok(self) -> bool:
        return self.worst >= 0.0


def error_bound_check(err_norm: np.ndarray, grad_norm: np.ndarray, hp: HyperParams) -> SlackReport:
    """Seed-averaged ||e_t||^2 against 4(1-mu)/mu^2 (max_{i<t} mean ||grad f(x_i)||^2 + chi^2).

    Arrays are (records, seeds) with consecutive t.
    """
    e2 = np.mean(err_norm**2, axis=1)
    g2 = np.mean(grad_norm**2, axis=1)
    prev_max = np.concatenate([[0.0], np.maximum.accumulate(g2)[:-1]])
    rhs = 4 * (1 - hp.mu) / hp.mu**2 * (prev_max + hp.chi2)
    return SlackReport(rhs - e2, np.zeros_like(e2))


def descent_rhs_extra(hp: HyperParams, T) -> np.ndarray:
    return hp.eta * np.asarray(T) * hp.chi2 * (2 * hp.L + 8 * hp.L**2 * hp.eta * (1 - hp.mu) / hp.mu**2)


def descent_lemma_check(trace: RunTrace, hp: HyperParams, per_seed: bool, z: float = 3.0,
                        rtol: float = 1e-9) -> SlackReport:
    """sum_{tau<T} ||grad f(x_tau)||^2 <= 4 (f(y_0) - f(y_T)) / eta + extra(T).

    ``per_seed`` asserts it for each replica (deterministic runs, with a
    rounding allowance of ``rtol`` times the magnitude); otherwise the
    replica average is compared with a ``z``-sigma band.
    """
    T = int(trace.t[-1])
    if trace.t.size != T + 1:
        raise ValueError("descent check needs every iteration recorded")
    lhs = np.sum(trace.grad_norm[:T] ** 2, axis=0)
    rhs = 4 * (trace.f_y[0] - trace.f_y[T]) / hp.eta + descent_rhs_extra(hp, T)
    diff = rhs - lhs
    if per_seed:
        scale = np.abs(lhs) + np.abs(4 * trace.f_y[0] / hp.eta) + np.abs(4 * trace.f_y[T] / hp.eta)
        return SlackReport(diff, rtol * scale)
    n = diff.size
    return SlackReport(np.array([diff.mean()]), np.array([z * diff.std(ddof=1) / math.sqrt(n)]))


def improve_or_localize_check(trace: RunTrace, hp: HyperParams, z: float = 3.0,
                              atol: float = 1e-12) -> SlackReport:
    """f(y_0) - E f(y_t) >= E||y_t - y_0||^2/(8 eta t) - eta^2 chi^2 t (L + 2(1-mu)L^2 eta/mu^2) - eta chi^2
    for every recorded t <= I of a run without resets. Expectations are
    replica averages; at t = 0 both sides are zero.
    """
    t = trace.t.astype(np.float64)
    keep = t <= hp.I
    t = t[keep]
    f0 = trace.f_y[0]
    dec = f0[None, :] - trace.f_y[keep]
    d2 = trace.y_drift[keep] ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        local = np.where(t[:, None] > 0, d2 / (8 * hp.eta * t[:, None]), 0.0)
    corr = hp.eta**2 * hp.chi2 * t * (hp.L + 2 * (1 - hp.mu) * hp.L**2 * hp.eta / hp.mu**2) + hp.eta * hp.chi2
    corr = np.where(t > 0, corr, 0.0)
    per = dec - local
    n = per.shape[1]
    mean = per.mean(axis=1) + corr
    if n > 1:
        band = z * per.std(axis=1, ddof=1) / math.sqrt(n)
    else:
        band = np.zeros_like(mean)
    return SlackReport(mean, band + atol * (1 + np.abs(dec).mean(axis=1)))


def y_diff_residual(trace: RunTrace, eta: float) -> np.ndarray:
    """max over t of ||dy_t + eta h_t|| / (eta ||h_t||), per replica, from
    a trace recorded with ``keep_vectors``."""
    v = trace.vectors
    if v is None:
        raise ValueError("trace has no stored vectors")
    y = v["y"]
    h = v["h"]
    dy = y[1:] - y[:-1]
    num = np.linalg.norm(dy + eta * h, axis=2)
    den = eta * np.linalg.norm(h, axis=2)
    # resets keep y continuous, so the identity holds across them as well
    rel = np.where(den > 0, num / np.where(den > 0, den, 1.0), num)
    return rel.max(axis=0, initial=0.0)


def certify_many(obj, points, eps: float, hp: HyperParams) -> list[StationarityReport]:
    return [certify(obj, p, eps, hp) for p in points]


def compressor_ratio_table(specs, trials: int, rng, sampler=None) -> list[dict]:
    """Monte-Carlo contraction ratio per spec with its 3/sqrt(trials) allowance."""
    rows = []
    for spec in specs:
        samp = sampler or C.isotropic_gaussian(spec.d)
        est = C.compression_factor_estimate(spec, samp, trials, rng)
        limit = (1 - spec.mu) + 3 / math.sqrt(trials)
        rows.append({"kind": spec.kind.value, "d": spec.d, "k": spec.k, "mu": spec.mu, "ratio": est.ratio,
                     "stderr": est.stderr, "limit": limit, "ok": est.ratio <= limit, "skipped": est.skipped})
    return rows
