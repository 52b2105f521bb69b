"""Run every heated-room pipeline and print/save the records.

    python scripts/reproduce_all.py [--out results.csv] [--threads N]
"""
import argparse
import csv
import sys

from stochabs.experiments import PIPELINES


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--out", default=None, help="optional CSV of all records")
    ap.add_argument("--threads", type=int, default=1)
    ap.add_argument("--only", choices=sorted(PIPELINES), action="append")
    args = ap.parse_args(argv)
    rows, failed = [], 0
    for name in args.only or PIPELINES:
        fn = PIPELINES[name]
        kwargs = {"threads": args.threads} if name in ("finite", "network") else {}
        print(f"== {name}")
        for rec in fn(**kwargs):
            print("  " + rec.line())
            rows.append((name, rec.name, rec.value, rec.provenance, rec.status, rec.note))
            failed += rec.status == "FAIL"
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["pipeline", "name", "value", "provenance", "status", "note"])
            w.writerows(rows)
    print(f"{failed} failed checks")
    return 1 if failed else 0


if __name__ == "__main__":
    sys.exit(main())
