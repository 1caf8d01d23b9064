"""Command-line entry point.

    compressed-sgd plan --config run.yaml
    compressed-sgd run --config run.yaml --out out/ --seed 3
    compressed-sgd escape|coupling|verify-compressors --config run.yaml
    compressed-sgd suite --out out/

Exit status is 0 exactly when the failure list is empty; the list is
printed as JSON on stdout and written to ``failures.json``.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis as A
from . import cluster as CL
from .compressors import CompressorSpec, Kind, message_cost_bits
from .config import ConfigError, build, load_config
from .linalg import SAMPLER, SeededRng
from .optimizer import RunAborted, _frac, comm_plan, randomk_size, run

EXIT_FAIL = 1
EXIT_CONFIG = 2


def iterations_for(spec_mu: float, linear: bool, d: int, eps: float, alpha: int) -> float:
    """alpha/eps^4 + sqrt(1-mu)/(mu eps^3) + c (1-mu)/(mu^2 eps^2.5), with
    c = 1 for linear compressors and d otherwise."""
    mu = spec_mu
    extra = 1.0 if linear else float(d)
    return alpha / eps**4 + math.sqrt(1 - mu) / (mu * eps**3) + extra * (1 - mu) / (mu**2 * eps**2.5)


def plan_report(spec: CompressorSpec, eps, alpha: int, hp=None, mu: float | None = None,
                value_bits: int = 64, workers: int = 1) -> dict:
    """Planned quantities plus the communication comparison against
    uncompressed SGD at the same accuracy."""
    d = spec.d
    e = float(_frac(eps))
    mu = mu if mu is not None else (hp.mu if hp is not None else spec.mu)
    per_round = None if spec.kind is Kind.QUANTIZATION else message_cost_bits(spec, value_bits)
    it_base = alpha / e**4
    it_spec = iterations_for(mu, spec.linear, d, e, alpha)
    out = {
        "compressor": spec.kind.value, "d": d, "eps": e, "alpha": alpha, "k": spec.k,
        "k_randomk": randomk_size(d, _frac(eps), alpha), "mu": mu, "per_round_bits": per_round,
        "iterations_uncompressed": it_base, "iterations": it_spec,
        "improvement_ratio": None if per_round is None else (d * value_bits * it_base) / (per_round * it_spec),
        # sqrt(alpha) eps^(-3/4), the RandomK saving up to constants
        "predicted_ratio": comm_plan(d, eps, alpha, value_bits).predicted_ratio if spec.kind is Kind.RANDOM_K else None,
    }
    if hp is not None:
        out.update({"eta": hp.eta, "eta_sigma": hp.eta_sigma, "eta_mu": hp.eta_mu, "I": hp.I, "R": hp.R,
                    "F": hp.F, "r": hp.r, "T": hp.T, "chi2": hp.chi2, "L": hp.L, "rho": hp.rho,
                    "f_max": hp.f_max, "constants": hp.to_dict()["constants"],
                    "predicted_total_bits": None if per_round is None else hp.T * per_round,
                    "workers": workers})
    return out


def _emit(out_dir: Path, failures: list[str], extra: dict | None = None) -> int:
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = {"failures": failures, **(extra or {})}
    (out_dir / "failures.json").write_text(json.dumps(payload, indent=2, default=_default) + "\n")
    print(json.dumps({"failures": failures}))
    return 0 if not failures else EXIT_FAIL


def _default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _experiment(args):
    cfg = load_config(args.config)
    ex = build(cfg, seed=args.seed, seeds=args.seeds_count)
    out = Path(args.out or cfg.output.dir)
    return ex, out


def cmd_plan(args) -> int:
    ex, out = _experiment(args)
    alpha = ex.hp.alpha
    rep = plan_report(ex.spec, ex.cfg.planner.eps, alpha, ex.hp, value_bits=ex.cfg.compressor.value_bits,
                      workers=len(ex.oracles))
    for key in ("compressor", "d", "k", "k_randomk", "mu", "eta", "I", "R", "F", "r", "T",
                "per_round_bits", "predicted_total_bits", "improvement_ratio", "predicted_ratio"):
        print(f"{key:>22}: {rep[key]}")
    out.mkdir(parents=True, exist_ok=True)
    (out / "plan.json").write_text(json.dumps(rep, indent=2, sort_keys=True, default=_default) + "\n")
    bad = ex.hp.violations()
    return _emit(out, bad)


def cmd_run(args) -> int:
    ex, out = _experiment(args)
    out.mkdir(parents=True, exist_ok=True)
    c = ex.cfg.execution
    vb = ex.cfg.compressor.value_bits
    T = c.T if c.T is not None else ex.hp.T
    failures = []
    try:
        if len(ex.oracles) > 1:
            if c.seeds != 1:
                raise ConfigError(f"{ex.cfg.source}: multi-worker runs take execution.seeds = 1")
            tr, ledger = CL.distributed_run(ex.oracles, ex.spec, ex.hp, ex.x0[0], seed=c.seed,
                                            reset_error=c.reset_error, T=T, threads=args.threads or c.threads,
                                            value_bits=vb, record_every=c.record_every)
            ledger.to_csv(out / "ledger.csv")
        else:
            tr = run(ex.oracle, ex.spec, ex.hp, ex.x0, seed=c.seed, reset_error=c.reset_error,
                     replicas=c.seeds, T=T, record_every=c.record_every, value_bits=vb)
    except RunAborted as exc:
        failures.append(str(exc))
        tr = exc.trace
    if tr is not None:
        tr.to_csv(out / "trace.csv")
        tr.write_summary(out / "summary.json")
        if tr.checkpoints and not failures:
            _write_certificates(out / "certificates.json", tr, ex)
    return _emit(out, failures)


def _write_certificates(path: Path, tr, ex) -> None:
    eps = ex.hp.eps
    rows = []
    for j in range(tr.replicas):
        cks = tr.checkpoints_of(j)
        if not cks:
            continue
        best = A.best_checkpoint(cks, ex.objective, eps, ex.hp)
        rows.append({"replica": j, "checkpoints": len(cks), "sosp_fraction": A.sosp_fraction(cks, ex.objective, eps, ex.hp),
                     "best": {"x": best.point, "grad_norm": best.grad_norm, "lambda_min": best.lambda_min,
                              "is_sosp": best.is_sosp}})
    path.write_text(json.dumps({"eps": eps, "replicas": rows}, indent=2, default=_default) + "\n")


def cmd_escape(args) -> int:
    ex, out = _experiment(args)
    c = ex.cfg.execution
    obj = ex.objective
    n = c.seeds
    target = obj.value(ex.x0) - ex.hp.F
    escaped_at = np.full(n, -1)

    def stop(t, f_row):
        newly = (f_row < target) & (escaped_at < 0)
        escaped_at[newly] = t
        return bool(np.all(escaped_at >= 0))

    T = c.T if c.T is not None else ex.hp.I_iters
    tr = run(ex.oracle, ex.spec, ex.hp, ex.x0, seed=c.seed, reset_error=c.reset_error, replicas=n, T=T,
             record_every=c.record_every, stop=stop)
    out.mkdir(parents=True, exist_ok=True)
    tr.to_csv(out / "escape_trace.csv")
    rate = float(np.mean(escaped_at >= 0))
    report = {"rate": rate, "escape_iteration": escaped_at.tolist(), "budget": T, "F": ex.hp.F}
    (out / "escape.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"escape rate {rate:.3f} over {n} seeds within {T} iterations")
    return _emit(out, [] if rate >= 0.9 else [f"escape rate {rate:.3f} < 0.9"])


def cmd_coupling(args) -> int:
    ex, out = _experiment(args)
    c = ex.cfg.execution
    T = c.T if c.T is not None else ex.hp.I_iters
    res = A.coupling_experiment(ex.objective, ex.oracle, ex.spec, ex.hp, ex.x0[0], c.seeds, T=T, seed=c.seed,
                                reset_error=c.reset_error)
    out.mkdir(parents=True, exist_ok=True)
    res.to_csv(out / "coupling.csv")
    failures = []
    report = {"gamma": res.gamma, "eta": res.eta, "escape_rate": float(np.mean(res.escaped | res.escaped_prime)),
              "bookkeeping_residual": res.bookkeeping_residual}
    try:
        fit = A.fit_growth(res, ex.hp.R)
        report.update(rate=fit.rate, expected=fit.expected, rel_error=fit.rel_error, window=[fit.t_start, fit.t_end])
        if fit.rel_error > 0.1:
            failures.append(f"growth rate {fit.rate:.4g} is not within 10% of {fit.expected:.4g}")
    except ValueError as exc:
        failures.append(f"growth fit: {exc}")
    if c.seeds >= 4:
        sd = A.same_distribution_test(res.f_x, res.f_xp)
        report.update(ks_pvalue=sd.ks_pvalue, moments_ok=sd.moments_ok)
        if not sd.ok:
            failures.append("coupled sequences fail the equal-distribution tests")
    if res.bookkeeping_residual > 1e-10:
        failures.append("yhat != xhat - eta ehat")
    (out / "coupling.json").write_text(json.dumps(report, indent=2, default=_default) + "\n")
    return _emit(out, failures)


def cmd_verify_compressors(args) -> int:
    d = 100
    trials = 100_000
    if args.config:
        cfg = load_config(args.config)
        d = cfg.objective.dim
    k = max(1, d // 10)
    specs = [CompressorSpec(Kind.IDENTITY, d), CompressorSpec(Kind.RANDOM_K, d, k=1),
             CompressorSpec(Kind.RANDOM_K, d, k=k), CompressorSpec(Kind.RANDOM_K, d, k=d),
             CompressorSpec(Kind.TOP_K, d, k=k), CompressorSpec(Kind.SIGN, d)]
    rows = A.compressor_ratio_table(specs, trials, SeededRng.for_purpose(args.seed or 0, SAMPLER))
    out = Path(args.out or "out")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "compressors.csv", "w") as fh:
        fh.write("kind,d,k,mu,ratio,stderr,limit,ok\n")
        for r in rows:
            fh.write(f"{r['kind']},{r['d']},{r['k'] or ''},{r['mu']:.17g},{r['ratio']:.17g},"
                     f"{r['stderr']:.17g},{r['limit']:.17g},{int(r['ok'])}\n")
    for r in rows:
        print(f"{r['kind']:>12} k={r['k'] or '-':>4} ratio={r['ratio']:.4f} limit={r['limit']:.4f} "
              f"{'ok' if r['ok'] else 'FAIL'}")
    return _emit(out, [f"{r['kind']} k={r['k']} ratio {r['ratio']:.4f} > {r['limit']:.4f}" for r in rows if not r["ok"]])


def cmd_suite(args) -> int:
    from .acceptance import run_all
    results = run_all()
    out = Path(args.out or "out")
    for r in results:
        print(r.line())
    details = [{"number": r.number, "name": r.name, "passed": r.passed, "seconds": r.seconds,
                "budget": r.budget, "details": r.details} for r in results]
    out.mkdir(parents=True, exist_ok=True)
    (out / "acceptance.json").write_text(json.dumps(details, indent=2, default=_default) + "\n")
    return _emit(out, [r.line() for r in results if not r.ok])


COMMANDS = {"plan": cmd_plan, "run": cmd_run, "escape": cmd_escape, "coupling": cmd_coupling,
            "verify-compressors": cmd_verify_compressors, "suite": cmd_suite}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="compressed-sgd", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", help="YAML run configuration")
    p.add_argument("--seed", type=int, default=None, help="override execution.seed")
    p.add_argument("--out", default=None, help="output directory (default: output.dir)")
    p.add_argument("--seeds-count", type=int, default=None, help="override execution.seeds")
    p.add_argument("--threads", type=int, default=None, help="worker threads for multi-worker runs")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is None and os.environ.get("COMPRESSED_SGD_THREADS"):
        args.threads = int(os.environ["COMPRESSED_SGD_THREADS"])
    if args.command not in ("suite", "verify-compressors") and not args.config:
        print("error: --config is required for this command", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        print(json.dumps({"failures": [str(exc)]}))
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
