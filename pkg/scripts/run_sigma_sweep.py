#!/usr/bin/env python3
"""Bandwidth robustness study: pretrain + probe the depth-weighted loss for
each sigma on the benchmark dataset, with shared seeds across cells."""

import argparse
import sys

import numpy as np

from wsp.benchmark import BENCHMARK_SEEDS, benchmark_dataset, probe_method, train_method
from wsp.evaluation import DEFAULT_SWEEP_SIGMAS


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--sigmas", default=",".join(str(s) for s in DEFAULT_SWEEP_SIGMAS))
    parser.add_argument("--seeds", default=",".join(str(s) for s in BENCHMARK_SEEDS))
    parser.add_argument("--out", default=None, help="optional CSV output path")
    args = parser.parse_args(argv)
    sigmas = [float(tok) for tok in args.sigmas.split(",") if tok.strip()]
    seeds = [int(tok) for tok in args.seeds.split(",") if tok.strip()]

    datasets = {seed: benchmark_dataset(seed) for seed in seeds}
    rows = []
    for sigma in sigmas:
        per_seed = []
        for seed in seeds:
            ckpt = train_method(datasets[seed], "wsp", seed, sigma=sigma)
            per_seed.append(probe_method(ckpt, datasets[seed], seed).mean_auc_patient)
        rows.append((sigma, float(np.mean(per_seed)), float(np.std(per_seed))))
        print(f"sigma={sigma}: AUC {rows[-1][1]:.3f} +- {rows[-1][2]:.3f}")

    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write("sigma,auc_mean,auc_std\n")
            for sigma, mean, std in rows:
                fh.write(f"{sigma!r},{mean!r},{std!r}\n")
        print(f"wrote {args.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
