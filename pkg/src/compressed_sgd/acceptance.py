"""The twelve acceptance experiments, each returning a pass/fail result with
the measured numbers. Used by the test-suite and the ``suite`` command.

Every experiment uses fixed seeds; a failure is reported, never retried.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from decimal import Decimal, getcontext
from fractions import Fraction
from typing import Callable

import numpy as np
from scipy import stats

from . import analysis as A
from . import cluster as CL
from . import compressors as C
from .compressors import CompressorSpec, Kind
from .linalg import INIT, SAMPLER, SeededRng
from .objectives import CubicRegQuadratic, DoubleWell, Quadratic, StochasticOracle, certified_constants, rotated_spectrum
from .optimizer import PlannerConstants, comm_plan, plan, randomk_size, run


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    seconds: float = 0.0
    budget: float = math.inf
    details: dict = field(default_factory=dict)

    @property
    def in_budget(self) -> bool:
        return self.seconds < self.budget

    @property
    def ok(self) -> bool:
        return self.passed and self.in_budget

    def line(self) -> str:
        status = "PASS" if self.ok else "FAIL"
        extra = "" if self.in_budget else f" (over budget {self.budget:g}s)"
        return f"criterion {self.number:2d} {status}: {self.name} [{self.seconds:.1f}s]{extra}"


def _uniform_x0(seed: int, n: int, d: int, scale: float = 1.0) -> np.ndarray:
    return scale * (2.0 * SeededRng.for_purpose(seed, INIT).uniform((n, d)) - 1.0)


# ---------------------------------------------------------------------------
# 1. compressor contracts

def compressor_contracts(trials: int = 100_000, seed: int = 1) -> dict:
    d = 100
    specs = [CompressorSpec(Kind.IDENTITY, d), CompressorSpec(Kind.RANDOM_K, d, k=1),
             CompressorSpec(Kind.RANDOM_K, d, k=d // 10), CompressorSpec(Kind.RANDOM_K, d, k=d),
             CompressorSpec(Kind.TOP_K, d, k=d // 10), CompressorSpec(Kind.SIGN, d)]
    rng = SeededRng.for_purpose(seed, SAMPLER)
    rows = A.compressor_ratio_table(specs, trials, rng)
    # unbiasedness of s=1 quantization on one fixed input
    dq = 10
    q = CompressorSpec(Kind.QUANTIZATION, dq, s=1)
    x = SeededRng.for_purpose(seed, INIT).normal(dq)
    draws = C.compress_rows(q, np.tile(x, (trials, 1)), SeededRng.for_purpose(seed, SAMPLER, 1))
    mean = draws.mean(axis=0)
    se = draws.std(axis=0, ddof=1) / math.sqrt(trials)
    z = np.abs(mean - x) / se
    quant_ok = bool(np.all(z <= 3.0))
    return {"passed": all(r["ok"] for r in rows) and quant_ok, "ratios": rows,
            "quantization_max_z": float(z.max()), "quantization_d": dq}


# ---------------------------------------------------------------------------
# 2. linearity

def linearity(triples: int = 1000, seed: int = 2) -> dict:
    d, k = 100, 10
    rng = SeededRng.for_purpose(seed, SAMPLER)
    rk = CompressorSpec(Kind.RANDOM_K, d, k=k)
    theta = C.draw_theta(rk, SeededRng.for_purpose(seed, SAMPLER, 1), 1)
    a, b = rng.normal((triples, 1)), rng.normal((triples, 1))
    X, Y = rng.normal((triples, d)), rng.normal((triples, d))
    lhs = C.apply(rk, a * X + b * Y, theta)
    rhs = a * C.apply(rk, X, theta) + b * C.apply(rk, Y, theta)
    scale = np.maximum(np.linalg.norm(lhs, axis=1), np.finfo(float).tiny)
    rel = float(np.max(np.linalg.norm(lhs - rhs, axis=1) / scale))
    tk = CompressorSpec(Kind.TOP_K, d, k=k)
    lt = C.apply(tk, a * X + b * Y, None)
    rt = a * C.apply(tk, X, None) + b * C.apply(tk, Y, None)
    err = np.linalg.norm(lt - rt, axis=1) / np.maximum(np.linalg.norm(lt, axis=1), 1e-300)
    bad = np.flatnonzero(err > 1e-6)
    witness = None
    if bad.size:
        i = int(bad[0])
        witness = {"index": i, "a": float(a[i, 0]), "b": float(b[i, 0]), "relative_violation": float(err[i])}
    return {"passed": rel <= 1e-12 and witness is not None, "randomk_max_rel": rel, "topk_witness": witness}


# ---------------------------------------------------------------------------
# 3. corrected-iterate identity

def _identity_objectives():
    d = 10
    H = rotated_spectrum(np.concatenate([[-0.5], np.linspace(0.1, 1.0, d - 1)]), rotation_seed=3)
    quad = Quadratic(H)
    cubic = CubicRegQuadratic(H, rho=1.0, box=3.0)
    well = DoubleWell(d, box=1.5)
    return [("quadratic", quad, (1.0, 0.01)), ("cubic", cubic, certified_constants(cubic, 3.0)[:2]),
            ("double_well", well, certified_constants(well, 1.5)[:2])]


def corrected_iterate_identity(T: int = 2000, seeds: int = 10, seed: int = 3) -> dict:
    """Every (objective, compressor, reset flag) cell; quantization runs at d=3,
    where its error feedback stays bounded."""
    worst = 0.0
    cells = []
    for oname, obj, (L, rho) in _identity_objectives():
        for kind in Kind:
            o = obj
            if kind is Kind.QUANTIZATION:
                o = _small_copy(obj)
            d = o.d
            spec = CompressorSpec(kind, d, k=2 if kind in (Kind.RANDOM_K, Kind.TOP_K) else None)
            mu = 1.0 - quantization_factor(d) if kind is Kind.QUANTIZATION else None
            oracle = StochasticOracle(o, sigma=0.1)
            hp0 = plan(0.1, L, rho, 0.1, L, d, spec, f_max=1.0, mu=mu)
            # short escape budget so the reset branch fires inside T
            c_I = 300 * hp0.eta * math.sqrt(rho * 0.1)
            hp = plan(0.1, L, rho, 0.1, L, d, spec, f_max=1.0, mu=mu, constants=PlannerConstants(c_I=c_I))
            x0 = _uniform_x0(seed, seeds, d, 0.5)
            for reset in (False, True):
                tr = run(oracle, spec, hp, x0, seed=seed, reset_error=reset, replicas=seeds, T=T, keep_vectors=True)
                res = float(A.y_diff_residual(tr, hp.eta).max())
                worst = max(worst, res)
                cells.append({"objective": oname, "compressor": kind.value, "reset_error": reset,
                              "max_rel_residual": res, "resets": int(tr.reset.sum())})
    return {"passed": worst <= 1e-10, "worst": worst, "cells": cells}


def quantization_factor(d: int, s: int = 1) -> float:
    return C.quantization_variance_factor(d, s)


def _small_copy(obj):
    d = 3
    if isinstance(obj, DoubleWell):
        return DoubleWell(d, box=obj.box)
    H = rotated_spectrum([-0.5, 0.4, 1.0], rotation_seed=4)
    if isinstance(obj, Quadratic):
        return Quadratic(H)
    return CubicRegQuadratic(H, rho=obj.rho, box=obj.box)


# ---------------------------------------------------------------------------
# 4. compression error bound

def error_bound(seeds: int = 100, T: int = 2000, seed: int = 4) -> dict:
    d = 50
    obj = Quadratic(np.diag(np.linspace(0.1, 1.0, d)))
    spec = CompressorSpec(Kind.RANDOM_K, d, k=d // 10)
    oracle = StochasticOracle(obj, sigma=0.1)
    hp = plan(0.1, 1.0, 0.01, 0.1, 1.0, d, spec, f_max=1.0)
    x0 = _uniform_x0(seed, seeds, d)
    tr = run(oracle, spec, hp, x0, seed=seed, replicas=seeds, T=T)
    rep = A.error_bound_check(tr.err_norm, tr.grad_norm, hp)
    ratio = np.mean(tr.err_norm**2, axis=1)[1:] / (rep.slack + np.mean(tr.err_norm**2, axis=1))[1:]
    return {"passed": rep.ok, "worst_slack": rep.worst, "max_ratio_to_bound": float(ratio.max()), "eta": hp.eta}


# ---------------------------------------------------------------------------
# 5. descent lemma

def descent_lemma(T: int = 3000, seed: int = 5) -> dict:
    d = 20
    obj = DoubleWell(d, box=1.2)
    L, rho, _ = certified_constants(obj, 1.2)
    out = {"exact": [], "stochastic": None}
    ok = True
    for kind in (Kind.IDENTITY, Kind.TOP_K, Kind.SIGN):
        spec = CompressorSpec(kind, d, k=2 if kind is Kind.TOP_K else None)
        hp = plan(0.1, L, rho, 0.0, L, d, spec, f_max=5.0, constants=PlannerConstants(c_r=0.0))
        x0 = _uniform_x0(seed, 10, d)
        tr = run(StochasticOracle(obj), spec, hp, x0, seed=seed, replicas=10, T=T)
        rep = A.descent_lemma_check(tr, hp, per_seed=True)
        ok &= rep.ok
        out["exact"].append({"compressor": kind.value, "worst_slack": rep.worst, "chi2": hp.chi2})
    spec = CompressorSpec(Kind.RANDOM_K, d, k=2)
    hp = plan(0.1, L, rho, 0.1, L, d, spec, f_max=5.0)
    x0 = _uniform_x0(seed, 200, d)
    tr = run(StochasticOracle(obj, sigma=0.1), spec, hp, x0, seed=seed, replicas=200, T=T)
    rep = A.descent_lemma_check(tr, hp, per_seed=False)
    ok &= rep.ok
    out["stochastic"] = {"compressor": "random_k", "mean_slack": float(rep.slack[0]), "band": float(rep.band[0]),
                         "chi2": hp.chi2}
    out["passed"] = bool(ok)
    return out


# ---------------------------------------------------------------------------
# 6. FOSP fraction

def fosp_share(seeds: int = 20, T_cap: int = 100_000, seed: int = 6) -> dict:
    d, eps, B = 20, 0.05, 1.2
    obj = DoubleWell(d, box=B)
    L, rho, f_max = certified_constants(obj, B)
    k = randomk_size(d, eps, 1)
    spec = CompressorSpec(Kind.RANDOM_K, d, k=k)
    oracle = StochasticOracle(obj, sigma=0.1)
    x0 = _uniform_x0(seed, seeds, d)
    f_max = float(np.max(obj.value(x0))) - obj.f_lower
    hp = plan(eps, L, rho, 0.1, L, d, spec, f_max=f_max, T_cap=T_cap)
    tr = run(oracle, spec, hp, x0, seed=seed, replicas=seeds)
    frac = A.fosp_fraction(tr, eps)
    good = int(np.sum(frac >= 0.5))
    return {"passed": good >= 18, "seeds_with_half_fosp": good, "fractions": [float(f) for f in frac],
            "k": k, "eta": hp.eta, "T": hp.T}


# ---------------------------------------------------------------------------
# 7. saddle escape

def escape(seeds: int = 50, seed: int = 7) -> dict:
    d, eps, B = 10, 0.1, 1.2
    obj = DoubleWell(d, box=B)
    L, rho, f_max = certified_constants(obj, B)
    oracle = StochasticOracle(obj)
    x0 = np.zeros(d)
    rows = []
    ok = True
    for kind, k, reset in ((Kind.IDENTITY, None, False), (Kind.RANDOM_K, 2, False), (Kind.TOP_K, 2, True)):
        spec = CompressorSpec(kind, d, k=k)
        hp = plan(eps, L, rho, 0.0, L, d, spec, f_max=f_max)
        target = float(obj.value(x0)) - hp.F
        T = hp.I_iters
        escaped_at = np.full(seeds, -1)

        def stop(t, f_row):
            newly = (f_row < target) & (escaped_at < 0)
            escaped_at[newly] = t
            return bool(np.all(escaped_at >= 0))

        tr = run(oracle, spec, hp, x0, seed=seed, reset_error=reset, replicas=seeds, T=T, record_every=10, stop=stop)
        rate = float(np.mean(escaped_at >= 0))
        ok &= rate >= 0.9
        rows.append({"compressor": kind.value, "reset_error": reset, "rate": rate, "I": T,
                     "median_escape_t": float(np.median(escaped_at[escaped_at >= 0])) if rate > 0 else None})
    # without any noise the saddle is an exact fixed point
    still = True
    for kind, k in ((Kind.IDENTITY, None), (Kind.RANDOM_K, 2), (Kind.TOP_K, 2)):
        spec = CompressorSpec(kind, d, k=k)
        hp = plan(eps, L, rho, 0.0, L, d, spec, f_max=f_max, constants=PlannerConstants(c_r=0.0))
        tr = run(oracle, spec, hp, x0, seed=seed, replicas=5, T=500)
        still &= bool(np.all(tr.final_x == 0.0)) and bool(np.all(tr.y_drift == 0.0))
    return {"passed": bool(ok and still), "rates": rows, "no_noise_fixed_point": still}


# ---------------------------------------------------------------------------
# 8. SOSP fraction

TOPK_SOSP_CONSTANTS = PlannerConstants(c_I=0.1)
TOPK_SOSP_T_CAP = 600_000


def sosp_share(seeds: int = 20, seed: int = 8) -> dict:
    d, eps, B = 10, 0.1, 1.2
    obj = DoubleWell(d, box=B)
    L, rho, _ = certified_constants(obj, B)
    oracle = StochasticOracle(obj)
    x0 = _uniform_x0(seed, seeds, d)
    f_max = float(np.max(obj.value(x0))) - obj.f_lower
    out = {}
    ok = True
    cases = (("random_k", CompressorSpec(Kind.RANDOM_K, d, k=2), False, PlannerConstants(), None),
             ("top_k", CompressorSpec(Kind.TOP_K, d, k=2), True, TOPK_SOSP_CONSTANTS, TOPK_SOSP_T_CAP))
    for name, spec, reset, consts, cap in cases:
        hp = plan(eps, L, rho, 0.0, L, d, spec, f_max=f_max, constants=consts, T_cap=cap)
        tr = run(oracle, spec, hp, x0, seed=seed, reset_error=reset, replicas=seeds, record_every=1000)
        fr = [A.sosp_fraction(tr.checkpoints_of(j), obj, eps, hp) for j in range(seeds)]
        med = float(np.median(fr))
        ok &= med >= 0.5
        out[name] = {"median": med, "fractions": fr, "T": hp.T, "I": hp.I, "eta": hp.eta,
                     "checkpoints_per_seed": len(tr.checkpoints) / seeds}
    out["passed"] = bool(ok)
    return out


# ---------------------------------------------------------------------------
# 9. coupling

def coupling(seeds: int = 200, dist_seeds: int = 500, seed: int = 9) -> dict:
    d, gamma = 10, 0.5
    obj = Quadratic(np.diag([-gamma] + [1.0] * (d - 1)))
    x0 = np.zeros(d)
    spec = CompressorSpec(Kind.IDENTITY, d)
    hp = plan(0.1, 1.0, 0.01, 0.0, 1.0, d, spec, f_max=1.0)
    a = hp.eta * gamma
    # the exact recurrence reaches R after about 2/a + ln(...)/a steps; run well past it
    T = math.ceil(4 / a)
    res = A.coupling_experiment(obj, StochasticOracle(obj), spec, hp, x0, seeds, T=T, seed=seed)
    fit = A.fit_growth(res, hp.R)
    spec2 = CompressorSpec(Kind.RANDOM_K, d, k=2)
    hp2 = plan(0.1, 1.0, 0.01, 0.5, 1.0, d, spec2, f_max=1.0)
    res2 = A.coupling_experiment(obj, StochasticOracle(obj, sigma=0.5), spec2, hp2, x0, dist_seeds,
                                 T=1500, seed=seed + 1)
    sd = A.same_distribution_test(res2.f_x, res2.f_xp)
    ok = fit.rel_error <= 0.1 and sd.ok and res.bookkeeping_residual <= 1e-10
    return {"passed": bool(ok), "rate": fit.rate, "expected": fit.expected, "rel_error": fit.rel_error,
            "window": [fit.t_start, fit.t_end], "ks_pvalue": sd.ks_pvalue, "moment_z_limit": sd.z_limit,
            "max_mean_z": float(np.abs(sd.mean_z).max()), "max_var_z": float(np.abs(sd.var_z).max()),
            "escape_rate": float(np.mean(res.escaped | res.escaped_prime))}


# ---------------------------------------------------------------------------
# 10. beta bounds

def beta_bounds(t_max: int = 10_000) -> dict:
    checks = [A.beta_bounds_exact(a, t_max) for a in ("0.01", "0.1", "0.5", "1.0")]
    return {"passed": all(c.ok for c in checks),
            "checks": [{"a": str(c.a), "upper": c.upper_ok, "lower": c.lower_ok, "recurrence": c.recurrence_ok}
                       for c in checks]}


# ---------------------------------------------------------------------------
# 11. communication arithmetic

def _k_reference(d: int, eps: str, alpha: int) -> int:
    getcontext().prec = 60
    v = Decimal(d) * Decimal(eps) ** Decimal("0.75") / Decimal(alpha).sqrt()
    k = int(v.to_integral_value(rounding="ROUND_CEILING"))
    return min(max(k, 1), d)


def comm_arithmetic() -> dict:
    from .cli import plan_report
    rows = []
    ok = True
    for d in (10, 100, 1000, 10_000):
        for eps in ("0.01", "0.05", "0.1", "0.5"):
            for alpha in (1, d):
                cp = comm_plan(d, eps, alpha)
                k_ok = cp.k == _k_reference(d, eps, alpha)
                ratio_ok = math.isclose(float(cp.coordinate_ratio), cp.predicted_ratio, rel_tol=1e-12)
                iters_ok = 1.0 <= cp.iters_randomk / cp.iters_uncompressed <= 3.0
                bits_ok = math.isclose(cp.bits_ratio, float(cp.coordinate_ratio) * cp.iters_uncompressed
                                       / cp.iters_randomk, rel_tol=1e-12)
                rows.append({"d": d, "eps": eps, "alpha": alpha, "k": cp.k, "d_over_k": str(cp.coordinate_ratio),
                             "predicted": cp.predicted_ratio, "ok": k_ok and ratio_ok and iters_ok and bits_ok})
                ok &= rows[-1]["ok"]
    # the plan command echoes the same k and a unit ratio for the identity baseline
    rep = plan_report(CompressorSpec(Kind.RANDOM_K, 100, k=randomk_size(100, "0.01", 1)), "0.01", 1)
    ident = plan_report(CompressorSpec(Kind.IDENTITY, 100), "0.01", 1)
    ok &= rep["k"] == 4 and rep["k_randomk"] == 4 and ident["improvement_ratio"] == 1.0
    return {"passed": bool(ok), "grid": rows, "example_k": rep["k"], "identity_ratio": ident["improvement_ratio"]}


# ---------------------------------------------------------------------------
# 12. distributed equivalence

def distributed(T: int = 2000, seed: int = 12) -> dict:
    d, W, k = 20, 4, 2
    obj = DoubleWell(d, box=1.5)
    L, rho, _ = certified_constants(obj, 1.5)
    spec = CompressorSpec(Kind.RANDOM_K, d, k=k)
    oracles = [StochasticOracle(obj, sigma=0.05 * (i + 1)) for i in range(W)]
    sigma = math.sqrt(sum(o.sigma**2 for o in oracles)) / W
    hp = plan(0.1, L, rho, sigma, L, d, spec, f_max=5.0)
    x0 = _uniform_x0(seed, 1, d)[0]
    dist, ledger = CL.distributed_run(oracles, spec, hp, x0, seed=seed, T=T, keep_vectors=True, threads=W)
    single = run(CL.AveragedOracle(oracles, seed), spec, hp, x0, seed=seed, T=T, keep_vectors=True)
    xs, xd = single.vectors["x"], dist.vectors["x"]
    rel_x = float(np.max(np.linalg.norm(xs - xd, axis=2) / np.maximum(np.linalg.norm(xs, axis=2), 1e-300)))
    es, ed = single.vectors["e"], dist.vectors["e"]
    abs_e = float(np.max(np.abs(es - ed)))
    e_scale = float(np.max(np.abs(es)))
    ledger_ok = (ledger.total_uplink == W * T * k * 64 and ledger.conserved()
                 and all(r[2] == k * 64 for r in ledger.rows))
    # W = 1 reduction, with and without the reset branch
    bitwise = True
    for kind, kk, reset in ((Kind.RANDOM_K, 2, False), (Kind.TOP_K, 2, True), (Kind.SIGN, None, True)):
        sp = CompressorSpec(kind, d, k=kk)
        h = plan(0.1, L, rho, 0.1, L, d, sp, f_max=5.0, constants=PlannerConstants(c_I=0.01))
        o = StochasticOracle(obj, sigma=0.1)
        a = run(o, sp, h, x0, seed=seed, reset_error=reset, T=T // 2)
        b, _ = CL.distributed_run([o], sp, h, x0, seed=seed, reset_error=reset, T=T // 2)
        for name in ("t", "f", "f_y", "grad_norm", "err_norm", "y_drift", "bits", "reset"):
            bitwise &= np.array_equal(getattr(a, name), getattr(b, name))
        bitwise &= np.array_equal(a.final_x, b.final_x)
    ok = rel_x <= 1e-10 and abs_e <= 1e-10 * max(e_scale, 1.0) and ledger_ok and bitwise
    return {"passed": bool(ok), "max_rel_x": rel_x, "max_abs_e": abs_e, "ledger_ok": ledger_ok,
            "total_uplink": ledger.total_uplink, "w1_bitwise": bitwise}


# ---------------------------------------------------------------------------

CRITERIA: list[tuple[int, str, Callable[[], dict], float]] = [
    (1, "compressor contracts", compressor_contracts, 10.0),
    (2, "linearity of RandomK, TopK witness", linearity, 1.0),
    (3, "corrected-iterate identity", corrected_iterate_identity, 30.0),
    (4, "compression error bound", error_bound, 30.0),
    (5, "compressed descent lemma", descent_lemma, 60.0),
    (6, "half of visited points are FOSP", fosp_share, 120.0),
    (7, "saddle escape", escape, 120.0),
    (8, "half of checkpoints are SOSP", sosp_share, 300.0),
    (9, "coupling growth and equal distributions", coupling, 120.0),
    (10, "beta_t bounds", beta_bounds, 1.0),
    (11, "communication arithmetic", comm_arithmetic, 1.0),
    (12, "distributed equivalence", distributed, 30.0),
]


def run_criterion(number: int) -> CriterionResult:
    for n, name, fn, budget in CRITERIA:
        if n == number:
            t0 = time.perf_counter()
            details = fn()
            secs = time.perf_counter() - t0
            return CriterionResult(n, name, bool(details.pop("passed")), secs, budget, details)
    raise KeyError(f"no criterion {number}")


def run_all(numbers=None) -> list[CriterionResult]:
    return [run_criterion(n) for n, *_ in CRITERIA if numbers is None or n in numbers]
