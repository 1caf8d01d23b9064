"""Escape rate and median escape time from the double-well saddle, per compressor.

    python3 scripts/escape_sweep.py --seeds 50 --out out/escape_sweep.csv
"""
import argparse
import csv
from pathlib import Path

import numpy as np

from compressed_sgd.compressors import CompressorSpec, Kind
from compressed_sgd.objectives import DoubleWell, StochasticOracle, certified_constants
from compressed_sgd.optimizer import plan, run


def escape(obj, spec, hp, seeds, seed, reset):
    x0 = np.zeros(obj.d)
    target = obj.value(x0) - hp.F
    at = np.full(seeds, -1)

    def stop(t, f):
        at[(f < target) & (at < 0)] = t
        return bool(np.all(at >= 0))

    run(StochasticOracle(obj), spec, hp, x0, seed=seed, reset_error=reset, replicas=seeds, T=hp.I_iters,
        record_every=10, stop=stop)
    return at


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--dim", type=int, default=10)
    p.add_argument("--eps", type=float, default=0.1)
    p.add_argument("--box", type=float, default=1.2)
    p.add_argument("--seeds", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ks", type=int, nargs="+", default=[1, 2, 5])
    p.add_argument("--out", default="out/escape_sweep.csv")
    args = p.parse_args()
    d = args.dim
    obj = DoubleWell(d, box=args.box)
    L, rho, f_max = certified_constants(obj, args.box)
    cells = [(CompressorSpec(Kind.IDENTITY, d), False), (CompressorSpec(Kind.SIGN, d), True)]
    cells += [(CompressorSpec(Kind.RANDOM_K, d, k=k), False) for k in args.ks]
    cells += [(CompressorSpec(Kind.TOP_K, d, k=k), True) for k in args.ks]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("compressor", "k", "reset_error", "eta", "I", "rate", "median_escape_t"))
        for spec, reset in cells:
            hp = plan(args.eps, L, rho, 0.0, L, d, spec, f_max=f_max)
            at = escape(obj, spec, hp, args.seeds, args.seed, reset)
            done = at[at >= 0]
            row = (spec.kind.value, spec.k or "", int(reset), f"{hp.eta:.6g}", hp.I_iters,
                   f"{done.size / at.size:.4f}", int(np.median(done)) if done.size else "")
            w.writerow(row)
            print(*row, sep="\t", flush=True)
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
