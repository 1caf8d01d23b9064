"""Run the acceptance criteria (all, or the numbers given) and write a JSON report.

    python3 scripts/run_acceptance.py 3 9 --out out/acceptance.json
"""
import argparse
import json
import sys
from pathlib import Path

from compressed_sgd.acceptance import run_criterion, CRITERIA


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("numbers", type=int, nargs="*")
    p.add_argument("--out", default="out/acceptance.json")
    args = p.parse_args()
    report = []
    for n, *_ in CRITERIA:
        if args.numbers and n not in args.numbers:
            continue
        r = run_criterion(n)
        print(r.line(), flush=True)
        report.append({"number": n, "name": r.name, "passed": r.passed, "ok": r.ok, "seconds": r.seconds,
                       "budget": r.budget, "details": r.details})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(report, indent=2, default=str) + "\n")
    return 0 if all(r["ok"] for r in report) else 1


if __name__ == "__main__":
    sys.exit(main())
