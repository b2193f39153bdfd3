"""Pretraining loop: optimizer, cosine schedule, epoch orchestration.

The whole run is a deterministic function of (dataset, encoder seed, trainer
seed): epoch partitions, slice draws and augmentation draws all derive their
randomness from explicit (seed, epoch, batch, position) keys.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .encoders import Encoder, EncoderCheckpoint, EncoderConfig, init_encoder
from .errors import ConfigError, ContractError, NonFiniteError
from .losses import BatchMeta, LossConfig, compute_loss
from .sampling import AugmentConfig, BatchSpec, SliceSample, epoch_batches, make_views, sample_batch_fallback

OPTIMIZERS = ("adaptive_moments", "sgd_momentum")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-4
    weight_decay: float = 1e-4
    optimizer: str = "adaptive_moments"
    epochs: int = 30
    batch_size: int = 32
    loss: LossConfig = field(default_factory=LossConfig)
    seed: int = 0
    cosine_granularity: str = "iteration"  # or "epoch"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    sampler_mode: str = "auto"  # strict | fallback | auto
    fallback_steps_per_epoch: int | None = None

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}")
        if self.cosine_granularity not in ("iteration", "epoch"):
            raise ConfigError("cosine_granularity must be 'iteration' or 'epoch'")
        if self.sampler_mode not in ("strict", "fallback", "auto"):
            raise ConfigError("sampler_mode must be 'strict', 'fallback' or 'auto'")


def cosine_lr(step: int, total_steps: int, lr: float) -> float:
    """Half-cosine decay from lr at step 0 to 0 at total_steps."""
    if total_steps < 1:
        raise ContractError("total_steps must be >= 1")
    if not 0 <= step <= total_steps:
        raise ContractError(f"step {step} outside [0, {total_steps}]")
    return lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def init_optim_state(params: dict[str, Tensor]) -> OptimState:
    state = OptimState()
    for name, p in params.items():
        state.m[name] = np.zeros_like(p.data)
        state.v[name] = np.zeros_like(p.data)
    return state


def optimizer_step(
    params: dict[str, Tensor],
    grads: dict[str, np.ndarray],
    state: OptimState,
    cfg: OptimConfig,
    lr_t: float,
) -> None:
    """One in-place update with decoupled weight decay.

    Decay multiplies each parameter by (1 - lr_t * weight_decay) before the
    gradient update, so zero-gradient steps shrink parameters geometrically.
    """
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.data.shape:
            raise ContractError(f"gradient shape {g.shape} != parameter shape {p.data.shape} ({name})")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r} at step {state.step}")
    t = state.step + 1
    decay = 1.0 - lr_t * cfg.weight_decay
    for name, p in params.items():
        g = grads[name]
        if cfg.weight_decay > 0:
            p.data *= decay
        if cfg.optimizer == "adaptive_moments":
            m = state.m[name]
            v = state.v[name]
            m *= cfg.beta1
            m += (1.0 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1.0 - cfg.beta2) * g * g
            m_hat = m / (1.0 - cfg.beta1**t)
            v_hat = v / (1.0 - cfg.beta2**t)
            p.data -= lr_t * m_hat / (np.sqrt(v_hat) + cfg.eps)
        else:
            vel = state.m[name]
            vel *= cfg.momentum
            vel += g
            p.data -= lr_t * vel
    state.step = t


@dataclass
class EpochRecord:
    epoch: int
    mean_loss: float
    lr: float


def _assemble_batch(batch: list[SliceSample], aug_cfg: AugmentConfig, key, arch: str):
    """Two views per slice, stacked into one array with matching metadata."""
    views = []
    y, d, slice_ids, patient_ids = [], [], [], []
    for pos, sample in enumerate(batch):
        view_a, view_b, meta = make_views(sample, aug_cfg, (*key, pos))
        for view in (view_a, view_b):
            views.append(view)
            y.append(meta.y)
            d.append(meta.d)
            slice_ids.append(meta.slice_id)
            patient_ids.append(meta.patient_id)
    stacked = np.stack(views).astype(np.float64)
    if arch == "mlp":
        x = stacked.reshape(len(views), -1)
    else:
        x = stacked[:, None, :, :]
    return Tensor(x), BatchMeta(y, d, slice_ids, patient_ids)


def pretrain(
    volumes,
    enc_cfg: EncoderConfig,
    optim_cfg: OptimConfig,
    aug_cfg: AugmentConfig | None = None,
):
    """Train an encoder on the given (already slice-selected) volumes.

    Returns (EncoderCheckpoint, list of per-epoch records).
    """
    if not volumes:
        raise ContractError("dataset is empty")
    if aug_cfg is None:
        aug_cfg = AugmentConfig(seed=optim_cfg.seed)
    enc = init_encoder(enc_cfg)
    state = init_optim_state(enc.params)
    n_patients = len({v.patient_id for v in volumes})
    strict = optim_cfg.sampler_mode == "strict" or (
        optim_cfg.sampler_mode == "auto" and n_patients >= optim_cfg.batch_size
    )
    steps_per_epoch = math.ceil(n_patients / optim_cfg.batch_size)
    if not strict and optim_cfg.fallback_steps_per_epoch:
        steps_per_epoch = optim_cfg.fallback_steps_per_epoch
    total_iters = optim_cfg.epochs * steps_per_epoch
    curve: list[EpochRecord] = []
    global_step = 0
    for epoch in range(optim_cfg.epochs):
        if strict:
            batches = epoch_batches(
                volumes, BatchSpec(optim_cfg.batch_size, "one_slice_per_patient", optim_cfg.seed, epoch)
            )
        else:
            batches = [
                sample_batch_fallback(
                    volumes,
                    BatchSpec(
                        optim_cfg.batch_size,
                        "fallback_balanced",
                        optim_cfg.seed,
                        epoch * steps_per_epoch + s,
                    ),
                )
                for s in range(steps_per_epoch)
            ]
        epoch_losses = []
        epoch_lr = None
        for b_idx, batch in enumerate(batches):
            x, meta = _assemble_batch(batch, aug_cfg, (optim_cfg.seed, epoch, b_idx), enc_cfg.arch)
            z = enc.project(enc.encode(x))
            loss = compute_loss(z, meta, optim_cfg.loss)
            value = loss.item()
            if not math.isfinite(value):
                err = NonFiniteError(
                    f"non-finite loss {value} at epoch {epoch}, batch {b_idx}"
                )
                err.details = {
                    "epoch": epoch,
                    "batch": b_idx,
                    "slice_ids": list(meta.slice_ids),
                    "patient_ids": list(meta.patient_ids),
                    "y": [int(v) for v in meta.y],
                    "d": [float(v) for v in meta.d],
                }
                raise err
            if optim_cfg.cosine_granularity == "iteration":
                lr_t = cosine_lr(global_step, total_iters, optim_cfg.lr)
            else:
                lr_t = cosine_lr(epoch, optim_cfg.epochs, optim_cfg.lr)
            if epoch_lr is None:
                epoch_lr = lr_t
            grad_map = ad.backward(loss)
            grads = {name: grad_map.wrt(p) for name, p in enc.params.items()}
            optimizer_step(enc.params, grads, state, optim_cfg, lr_t)
            epoch_losses.append(value)
            global_step += 1
        curve.append(EpochRecord(epoch=epoch, mean_loss=float(np.mean(epoch_losses)), lr=float(epoch_lr)))
    ckpt = EncoderCheckpoint.from_encoder(
        enc,
        step=global_step,
        loss_kind=optim_cfg.loss.loss_kind,
        loss_sigma=optim_cfg.loss.sigma,
    )
    return ckpt, curve


def write_loss_curve(path, curve: list[EpochRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,mean_loss,lr\n")
        for rec in curve:
            fh.write(f"{rec.epoch},{float(rec.mean_loss)!r},{float(rec.lr)!r}\n")
