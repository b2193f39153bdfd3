#!/usr/bin/env python3
"""Run the desk-scale benchmark: five pretraining methods over five seeds,
each evaluated with a stratified 5-fold patient-level linear probe.

Prints one row per method (mean +- std over seeds) and optionally writes the
per-seed table as CSV.
"""

import argparse
import sys

import numpy as np

from wsp.benchmark import BENCHMARK_METHODS, BENCHMARK_SEEDS, run_benchmark


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--seeds", default=",".join(str(s) for s in BENCHMARK_SEEDS),
                        help="comma-separated seeds (default 0,1,2,3,4)")
    parser.add_argument("--out", default=None, help="optional CSV path for per-seed AUCs")
    args = parser.parse_args(argv)
    seeds = [int(tok) for tok in args.seeds.split(",") if tok.strip()]

    results = run_benchmark(seeds=seeds)
    print(f"{'method':<12} {'AUC mean':>9} {'std':>7}  per-seed")
    for kind in BENCHMARK_METHODS:
        values = [results["auc"][kind][s] for s in seeds]
        per_seed = " ".join(f"{v:.3f}" for v in values)
        print(f"{kind:<12} {np.mean(values):>9.3f} {np.std(values):>7.3f}  {per_seed}")

    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("method,seed,auc_patient\n")
            for kind in BENCHMARK_METHODS:
                for s in seeds:
                    fh.write(f"{kind},{s},{results['auc'][kind][s]!r}\n")
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
