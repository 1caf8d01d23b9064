"""Communication table: RandomK sizing and predicted savings over a (d, eps, alpha) grid.

    python3 scripts/comm_table.py --out out/comm_table.csv
"""
import argparse
import csv
from pathlib import Path

from compressed_sgd.optimizer import comm_plan


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="out/comm_table.csv")
    p.add_argument("--dims", type=int, nargs="+", default=[10, 100, 1000, 10000])
    p.add_argument("--eps", nargs="+", default=["0.01", "0.05", "0.1", "0.5"])
    p.add_argument("--value-bits", type=int, default=64)
    args = p.parse_args()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("d", "eps", "alpha", "k", "d_over_k", "predicted_ratio", "iters_uncompressed",
                    "iters_randomk", "bits_ratio"))
        for d in args.dims:
            for eps in args.eps:
                for alpha in (1, d):
                    cp = comm_plan(d, eps, alpha, args.value_bits)
                    w.writerow((d, eps, alpha, cp.k, float(cp.coordinate_ratio), f"{cp.predicted_ratio:.6g}",
                                f"{cp.iters_uncompressed:.6g}", f"{cp.iters_randomk:.6g}", f"{cp.bits_ratio:.6g}"))
    print(f"wrote {out}")


if __name__ == "__main__":
    main()
