"""Desk-scale benchmark recipe: dataset, training schedule, probe protocol.

One place defines the configuration used by the experiment scripts and the
acceptance suite, so "the synthetic benchmark" always means the same runs:
60 volumes x 24 slices at 32x32 with 10% label noise, 30 pretraining epochs
per method, and a stratified 5-fold patient-level probe, repeated over five
shared seeds.
"""

from __future__ import annotations

from dataclasses import replace

from .data import GeneratorConfig, central_view, generate_synthetic_dataset
from .encoders import EncoderCheckpoint, EncoderConfig, init_encoder
from .evaluation import ProbeConfig, ProbeReport, run_probe_protocol
from .losses import LossConfig
from .training import OptimConfig, pretrain

BENCHMARK_SEEDS = (0, 1, 2, 3, 4)
BENCHMARK_METHODS = ("random", "infonce", "supcon", "depth_aware", "wsp")
BENCHMARK_SIGMA = 0.1
BENCHMARK_TAU = 0.2
BENCHMARK_LR = 1e-3
BENCHMARK_EPOCHS = 30
BENCHMARK_BATCH = 32


def benchmark_generator(**overrides) -> GeneratorConfig:
    cfg = GeneratorConfig(n_volumes=60, slices_per_volume=24, height=32, width=32, noise_rate=0.1)
    return replace(cfg, **overrides) if overrides else cfg


def benchmark_dataset(seed: int, **generator_overrides):
    """Generated volumes with the central 70% of slices retained."""
    _, volumes = generate_synthetic_dataset(benchmark_generator(**generator_overrides), seed)
    return central_view(volumes)


def benchmark_encoder(seed: int) -> EncoderConfig:
    return EncoderConfig(seed=seed)


def benchmark_optim(kind: str, seed: int, sigma: float = BENCHMARK_SIGMA) -> OptimConfig:
    return OptimConfig(
        lr=BENCHMARK_LR,
        epochs=BENCHMARK_EPOCHS,
        batch_size=BENCHMARK_BATCH,
        loss=LossConfig(tau=BENCHMARK_TAU, sigma=sigma, loss_kind=kind),
        seed=seed,
    )


def train_method(volumes, kind: str, seed: int, sigma: float = BENCHMARK_SIGMA) -> EncoderCheckpoint:
    """Pretrained checkpoint for one method; 'random' skips training."""
    if kind == "random":
        return EncoderCheckpoint.from_encoder(init_encoder(benchmark_encoder(seed)), 0, "random")
    ckpt, _ = pretrain(volumes, benchmark_encoder(seed), benchmark_optim(kind, seed, sigma))
    return ckpt


def probe_method(ckpt: EncoderCheckpoint, volumes, seed: int) -> ProbeReport:
    return run_probe_protocol(ckpt, volumes, ProbeConfig(seed=seed))


def run_benchmark(seeds=BENCHMARK_SEEDS, methods=BENCHMARK_METHODS, keep_checkpoints=("random", "wsp")):
    """Pretrain + probe every method over the shared seeds.

    Returns a dict with per-method fold-mean AUCs per seed, the retained
    volumes per seed, and the checkpoints listed in ``keep_checkpoints``.
    """
    results = {
        "auc": {kind: {} for kind in methods},
        "reports": {kind: {} for kind in methods},
        "volumes": {},
        "checkpoints": {kind: {} for kind in keep_checkpoints},
    }
    for seed in seeds:
        volumes = benchmark_dataset(seed)
        results["volumes"][seed] = volumes
        for kind in methods:
            ckpt = train_method(volumes, kind, seed)
            report = probe_method(ckpt, volumes, seed)
            results["auc"][kind][seed] = report.mean_auc_patient
            results["reports"][kind][seed] = report
            if kind in keep_checkpoints:
                results["checkpoints"][kind][seed] = ckpt
    return results
