"""Acceptance suite: one test per criterion, each printing a PASS line.

The heavy pieces (the five-method benchmark over five seeds, the bandwidth
sweep and the negative control) are computed once in module-scoped fixtures
and shared across criteria.
"""

import math
import time

import numpy as np
import pytest

from wsp import autodiff as ad
from wsp.autodiff import Tensor
from wsp.benchmark import (
    BENCHMARK_SEEDS,
    BENCHMARK_SIGMA,
    benchmark_dataset,
    probe_method,
    run_benchmark,
    train_method,
)
from wsp.cli import main
from wsp.evaluation import (
    DEFAULT_SWEEP_SIGMAS,
    ProbeConfig,
    auc,
    extract_representations,
    pca_project,
    probe_representations,
    stratified_kfold,
)
from wsp.kernels import gaussian_weight, normalize_over_positives
from wsp.losses import LOSS_FUNCTIONS, LossConfig, gradient_check, wsp_loss
from wsp.sampling import BatchSpec, epoch_batches, sample_batch
from wsp.training import cosine_lr

from oracles import brute_force_auc, naive_kernel_loss, paired_random_batch


def ok(criterion: int, message: str) -> None:
    print(f"ACCEPTANCE {criterion:02d} PASS: {message}")


@pytest.fixture(scope="module")
def bench():
    return run_benchmark()


@pytest.fixture(scope="module")
def sweep_results(bench):
    """Mean patient AUC per sigma over the benchmark seeds (sigma 0.1 reuses
    the benchmark's wsp runs)."""
    table = {}
    for sigma in DEFAULT_SWEEP_SIGMAS:
        per_seed = []
        for seed in BENCHMARK_SEEDS:
            if sigma == BENCHMARK_SIGMA:
                per_seed.append(bench["auc"]["wsp"][seed])
            else:
                volumes = bench["volumes"][seed]
                ckpt = train_method(volumes, "wsp", seed, sigma=sigma)
                per_seed.append(probe_method(ckpt, volumes, seed).mean_auc_patient)
        table[sigma] = float(np.mean(per_seed))
    return table


@pytest.fixture(scope="module")
def null_control():
    """All five methods probed on a dataset with the class signal removed."""
    seed = 0
    volumes = benchmark_dataset(seed, contour_amplitudes=(0.0, 0.0, 0.0, 0.0))
    n_pos = sum(1 for v in volumes if v.y_strong == 1)
    n_neg = len(volumes) - n_pos
    sigma_bin = math.sqrt((n_pos + n_neg + 1) / (12.0 * n_pos * n_neg))
    aucs = {}
    for kind in ("random", "infonce", "supcon", "depth_aware", "wsp"):
        ckpt = train_method(volumes, kind, seed)
        aucs[kind] = probe_method(ckpt, volumes, seed).mean_auc_patient
    return aucs, sigma_bin


def test_criterion_01_gradient_correctness():
    start = time.perf_counter()
    results = gradient_check(seed=0, n_batches=20)
    elapsed = time.perf_counter() - start
    assert set(results) == {"wsp", "supcon", "depth_aware", "infonce"}
    for kind, err in results.items():
        assert err < 1e-5, f"{kind}: max relative error {err:.3e}"
    assert elapsed < 10.0, f"gradient check took {elapsed:.1f}s"
    ok(1, f"max rel errors {max(results.values()):.2e} across 4 loss kinds in {elapsed:.1f}s")


def test_criterion_02_reduction_identities():
    rng = np.random.default_rng(2)
    worst = {"supcon": 0.0, "depth": 0.0, "infonce": 0.0, "sigma_limit": 0.0}
    for _ in range(50):
        z, meta = paired_random_batch(rng, n_slices=int(rng.integers(2, 5)), dim=8)
        zt = Tensor(z)
        cfg = LossConfig(tau=0.4, sigma=0.15)

        equal_d = meta.take(range(len(meta)))
        equal_d.d[:] = 0.5
        a = LOSS_FUNCTIONS["wsp"](zt, equal_d, cfg).item()
        b = LOSS_FUNCTIONS["supcon"](zt, equal_d, cfg).item()
        worst["supcon"] = max(worst["supcon"], abs(a - b))

        equal_y = meta.take(range(len(meta)))
        equal_y.y[:] = 3
        a = LOSS_FUNCTIONS["wsp"](zt, equal_y, cfg).item()
        b = LOSS_FUNCTIONS["depth_aware"](zt, equal_y, cfg).item()
        worst["depth"] = max(worst["depth"], abs(a - b))

        unique = meta.take(range(len(meta)))
        unique.y[:] = np.repeat(np.arange(len(meta) // 2), 2)
        a = LOSS_FUNCTIONS["wsp"](zt, unique, cfg).item()
        b = LOSS_FUNCTIONS["infonce"](zt, unique, cfg).item()
        worst["infonce"] = max(worst["infonce"], abs(a - b))

        wide = LossConfig(tau=0.4, sigma=1e6)
        a = LOSS_FUNCTIONS["wsp"](zt, meta, wide).item()
        b = LOSS_FUNCTIONS["supcon"](zt, meta, wide).item()
        worst["sigma_limit"] = max(worst["sigma_limit"], abs(a - b))

    assert worst["supcon"] < 1e-9
    assert worst["depth"] < 1e-9
    assert worst["infonce"] < 1e-9
    assert worst["sigma_limit"] < 1e-6
    ok(2, f"identity gaps: supcon {worst['supcon']:.1e}, depth {worst['depth']:.1e}, "
          f"infonce {worst['infonce']:.1e}, sigma=1e6 {worst['sigma_limit']:.1e}")


def test_criterion_03_oracle_equivalence():
    rng = np.random.default_rng(3)
    worst = 0.0
    for convention in ("exclude_anchor", "literal_paper"):
        for _ in range(25):
            z, meta = paired_random_batch(rng, n_slices=int(rng.integers(2, 7)), dim=10)
            cfg = LossConfig(tau=0.3, sigma=0.12, denominator_convention=convention)
            fast = wsp_loss(Tensor(z), meta, cfg).item()
            slow = naive_kernel_loss(
                z, meta.y, meta.d, meta.slice_ids, cfg.tau, cfg.sigma, "wsp", convention
            )
            worst = max(worst, abs(fast - slow))
    assert worst < 1e-12
    ok(3, f"vectorized vs triple-loop enumeration: max gap {worst:.2e} (M <= 12)")


def test_criterion_04_kernel_algebra():
    rng = np.random.default_rng(4)
    for _ in range(200):
        size = int(rng.integers(1, 9))
        weights = {i: float(rng.uniform(1e-6, 10.0)) for i in range(size)}
        normalized = normalize_over_positives(weights)
        assert abs(sum(normalized.values()) - 1.0) <= 1e-12
        scale = float(rng.uniform(1e-6, 1e6))
        rescaled = normalize_over_positives({k: v * scale for k, v in weights.items()})
        for key in weights:
            assert abs(rescaled[key] - normalized[key]) <= 1e-12
    grid = np.linspace(0.0, 1.0, 100)
    values = [gaussian_weight(0.0, float(d), 0.1) for d in grid]
    assert all(b < a for a, b in zip(values, values[1:]))
    ok(4, "normalization sums, scale invariance (1e-12) and 100-point monotonicity hold")


def test_criterion_05_sampler_properties(balanced_volumes):
    for epoch in range(100):
        spec = BatchSpec(batch_size=8, seed=17, epoch=epoch)
        batch = sample_batch(balanced_volumes, spec)
        patients = [s.patient_id for s in batch]
        assert len(set(patients)) == 8
        counts: dict[int, int] = {}
        for s in batch:
            counts[s.y] = counts.get(s.y, 0) + 1
        assert max(counts.values()) - min(counts.values()) <= 1

        partition = epoch_batches(balanced_volumes, spec)
        seen = [s.patient_id for b in partition for s in b]
        assert len(seen) == len(balanced_volumes)
        assert len(set(seen)) == len(seen)
        for b in partition:
            assert len({s.patient_id for s in b}) == len(b)
            per_class: dict[int, int] = {}
            for s in b:
                per_class[s.y] = per_class.get(s.y, 0) + 1
            assert max(per_class.values()) - min(per_class.values()) <= 1
    ok(5, "100 seeded epochs: distinct patients, balance <= 1, full coverage")


def test_criterion_06_synthetic_benchmark(bench):
    means = {kind: float(np.mean(list(per_seed.values()))) for kind, per_seed in bench["auc"].items()}
    gap = means["wsp"] - means["random"]
    rivals = max(means["infonce"], means["supcon"], means["depth_aware"])
    summary = " ".join(f"{kind}={means[kind]:.3f}" for kind in means)
    assert gap >= 0.10, f"wsp-random gap {gap:.3f} ({summary})"
    assert means["wsp"] >= rivals - 0.02, f"wsp {means['wsp']:.3f} vs best rival {rivals:.3f}"
    ok(6, f"{summary} | gap +{gap:.3f}, dominance {means['wsp'] - rivals:+.3f}")


def test_criterion_07_negative_control(null_control):
    aucs, sigma_bin = null_control
    lo, hi = 0.5 - 3 * sigma_bin, 0.5 + 3 * sigma_bin
    for kind, value in aucs.items():
        assert lo <= value <= hi, f"{kind}: {value:.3f} outside [{lo:.3f}, {hi:.3f}]"
    summary = " ".join(f"{k}={v:.3f}" for k, v in aucs.items())
    ok(7, f"zero-amplitude AUCs within [{lo:.3f}, {hi:.3f}]: {summary}")


def test_criterion_08_sigma_sweep_robustness(bench, sweep_results):
    baseline = float(np.mean(list(bench["auc"]["random"].values())))
    assert set(sweep_results) == set(DEFAULT_SWEEP_SIGMAS)
    for sigma, value in sweep_results.items():
        assert value >= baseline, f"sigma={sigma}: {value:.3f} < random baseline {baseline:.3f}"
    summary = " ".join(f"{s}:{v:.3f}" for s, v in sorted(sweep_results.items()))
    ok(8, f"all sweep cells >= random baseline {baseline:.3f} | {summary}")


def test_criterion_09_pca_structure(bench):
    stats = {"wsp": {"corr": [], "auc2d": []}, "random": {"corr": [], "auc2d": []}}
    for kind in ("wsp", "random"):
        for seed in BENCHMARK_SEEDS:
            ckpt = bench["checkpoints"][kind][seed]
            volumes = bench["volumes"][seed]
            table = extract_representations(ckpt, volumes)
            coords, _ = pca_project(table.repr, modes=2)
            corr = max(
                abs(float(np.corrcoef(coords[:, mode], table.d)[0, 1])) for mode in range(2)
            )
            report = probe_representations(table, ProbeConfig(seed=seed), features=coords)
            stats[kind]["corr"].append(corr)
            stats[kind]["auc2d"].append(report.mean_auc_patient)
    wsp_corr = float(np.mean(stats["wsp"]["corr"]))
    wsp_auc = float(np.mean(stats["wsp"]["auc2d"]))
    rnd_corr = float(np.mean(stats["random"]["corr"]))
    rnd_auc = float(np.mean(stats["random"]["auc2d"]))
    assert wsp_corr >= 0.4, f"wsp depth correlation {wsp_corr:.3f}"
    assert wsp_auc >= 0.7, f"wsp 2D probe AUC {wsp_auc:.3f}"
    assert rnd_corr < 0.4 or rnd_auc < 0.7, (
        f"random passes both prongs: corr {rnd_corr:.3f}, auc {rnd_auc:.3f}"
    )
    ok(9, f"wsp corr {wsp_corr:.3f} / 2D-AUC {wsp_auc:.3f}; random corr {rnd_corr:.3f} / "
          f"2D-AUC {rnd_auc:.3f}")


def test_criterion_10_pipeline_determinism(tmp_path):
    outputs = []
    for name in ("one", "two"):
        root = tmp_path / name
        data = root / "data"
        assert main(["generate", "--out", str(data), "--volumes", "14", "--slices", "6", "--seed", "9"]) == 0
        ckpt = root / "enc.ckpt"
        assert main(
            [
                "pretrain", "--data", str(data), "--loss", "wsp", "--epochs", "2",
                "--batch", "4", "--out", str(ckpt), "--seed", "9",
            ]
        ) == 0
        metrics = root / "metrics.csv"
        assert main(
            ["probe", "--data", str(data), "--ckpt", str(ckpt), "--folds", "3", "--out", str(metrics), "--seed", "9"]
        ) == 0
        outputs.append(root)
    first = (outputs[0] / "metrics.csv").read_bytes()
    second = (outputs[1] / "metrics.csv").read_bytes()
    assert first == second
    assert (outputs[0] / "enc.ckpt").read_bytes() == (outputs[1] / "enc.ckpt").read_bytes()
    ok(10, "generate -> pretrain -> probe replay reproduces metrics.csv byte-identically")


def test_criterion_11_metric_oracles():
    rng = np.random.default_rng(11)
    worst = 0.0
    for _ in range(30):
        n = int(rng.integers(10, 201))
        scores = np.round(rng.random(n), 2)  # coarse grid forces ties
        labels = np.zeros(n, dtype=int)
        labels[rng.permutation(n)[: int(rng.integers(1, n))] ] = 1
        if labels.sum() in (0, n):
            continue
        worst = max(worst, abs(auc(scores, labels) - brute_force_auc(scores, labels)))
    assert worst < 1e-12

    pids = [f"p{i}" for i in range(37)]
    labels = [1] * 17 + [0] * 20
    folds = stratified_kfold(pids, labels, k=5, seed=5)
    assert len(folds) == 37 and set(folds.tolist()) <= set(range(5))
    for cls, total in ((1, 17), (0, 20)):
        per_fold = [int(((folds == f) & (np.asarray(labels) == cls)).sum()) for f in range(5)]
        assert sum(per_fold) == total
        assert max(per_fold) - min(per_fold) <= 1

    assert cosine_lr(0, 80, 2e-3) == 2e-3
    assert cosine_lr(80, 80, 2e-3) == pytest.approx(0.0, abs=1e-19)
    assert cosine_lr(40, 80, 2e-3) == pytest.approx(1e-3, abs=1e-18)
    ok(11, f"AUC vs brute force gap {worst:.2e}; fold partition exact; cosine endpoints exact")
