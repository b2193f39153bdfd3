"""Pair-weighting kernels over a discrete label and a normalized depth.

The depth kernel is an unnormalized Gaussian: the loss renormalizes weights
over each anchor's positive set, so any constant factor would cancel anyway
(scale invariance is asserted in the tests).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ConfigError, ContractError

KERNEL_KINDS = ("gaussian", "dirac", "composite", "constant")


@dataclass(frozen=True)
class KernelConfig:
    sigma: float = 0.1
    kind: str = "composite"

    def __post_init__(self):
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.kind not in KERNEL_KINDS:
            raise ConfigError(f"kind must be one of {KERNEL_KINDS}, got {self.kind!r}")


def gaussian_weight(d_a: float, d_b: float, sigma: float) -> float:
    """exp(-(d_a - d_b)^2 / (2 sigma^2)): 1 at equal depths, decaying with distance."""
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    diff = d_a - d_b
    return math.exp(-(diff * diff) / (2.0 * sigma * sigma))


def dirac_weight(y_a: int, y_b: int) -> float:
    return 1.0 if y_a == y_b else 0.0


def composite_weight(y_a: int, y_b: int, d_a: float, d_b: float, sigma: float) -> float:
    """Label gate times depth proximity: nonzero only for equal labels."""
    return dirac_weight(y_a, y_b) * gaussian_weight(d_a, d_b, sigma)


def kernel_weight(cfg: KernelConfig, y_a: int, y_b: int, d_a: float, d_b: float) -> float:
    """Evaluate the configured kernel kind on one pair."""
    if cfg.kind == "gaussian":
        return gaussian_weight(d_a, d_b, cfg.sigma)
    if cfg.kind == "dirac":
        return dirac_weight(y_a, y_b)
    if cfg.kind == "composite":
        return composite_weight(y_a, y_b, d_a, d_b, cfg.sigma)
    return 1.0


def normalize_over_positives(weights: dict) -> dict:
    """Rescale an anchor's positive-set weights to sum to one.

    Raises ContractError when the set is empty or sums to zero; callers in the
    loss layer catch that as the anchor-skip signal.
    """
    if not weights:
        raise ContractError("empty positive set")
    total = sum(weights.values())
    if total <= 0.0:
        raise ContractError("all positive weights are zero")
    return {k: v / total for k, v in weights.items()}
