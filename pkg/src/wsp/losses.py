"""Contrastive loss family over a shared similarity matrix.

All four losses share one skeleton: a per-anchor set of positives, a weight
for each positive (normalized per anchor), and a log-ratio of the positive's
similarity against a log-sum-exp over competing views. They differ only in
how positives are chosen and weighted:

  wsp          same weak label, Gaussian-in-depth weights
  supcon       same weak label, uniform weights
  depth_aware  every other view, Gaussian-in-depth weights
  infonce      the sibling augmented view only

The denominator index set is configurable: ``exclude_anchor`` drops both the
anchor and the current positive, ``literal_paper`` drops only the positive
(keeping the anchor's self-similarity). One convention applies uniformly to
all four losses so their reduction identities hold exactly.

Anchors with an empty or fully-underflowed positive set contribute nothing
and are excluded from the mean; the same applies to pairs whose denominator
set is empty (only possible for two views under ``exclude_anchor``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, ContractError

LOSS_KINDS = ("wsp", "supcon", "depth_aware", "infonce")
DENOMINATOR_CONVENTIONS = ("exclude_anchor", "literal_paper")

_UNIT_ROW_TOL = 1e-6


@dataclass(frozen=True)
class LossConfig:
    tau: float = 0.1
    sigma: float = 0.1
    loss_kind: str = "wsp"
    denominator_convention: str = "exclude_anchor"

    def __post_init__(self):
        if self.tau <= 0:
            raise ConfigError(f"tau must be positive, got {self.tau}")
        if self.sigma <= 0:
            raise ConfigError(f"sigma must be positive, got {self.sigma}")
        if self.loss_kind not in LOSS_KINDS:
            raise ConfigError(f"loss_kind must be one of {LOSS_KINDS}, got {self.loss_kind!r}")
        if self.denominator_convention not in DENOMINATOR_CONVENTIONS:
            raise ConfigError(
                f"denominator_convention must be one of {DENOMINATOR_CONVENTIONS},"
                f" got {self.denominator_convention!r}"
            )


class BatchMeta:
    """Per-view metadata: weak label, normalized depth, slice and patient ids.

    Views originating from the same slice must agree on (y, d).
    """

    def __init__(
        self,
        y: Sequence[int],
        d: Sequence[float],
        slice_ids: Sequence,
        patient_ids: Sequence,
    ):
        self.y = np.asarray(y, dtype=np.int64)
        self.d = np.asarray(d, dtype=np.float64)
        self.slice_ids = tuple(slice_ids)
        self.patient_ids = tuple(patient_ids)
        n = len(self.y)
        if not (len(self.d) == len(self.slice_ids) == len(self.patient_ids) == n):
            raise ContractError("BatchMeta fields must have equal length")
        if np.any(self.d < 0.0) or np.any(self.d > 1.0):
            raise ContractError("normalized depth must lie in [0, 1]")
        per_slice: dict = {}
        for i, sid in enumerate(self.slice_ids):
            prev = per_slice.setdefault(sid, i)
            if prev != i and (self.y[prev] != self.y[i] or self.d[prev] != self.d[i]):
                raise ContractError(f"views of slice {sid!r} disagree on (y, d)")

    def __len__(self) -> int:
        return len(self.y)

    def take(self, indices: Sequence[int]) -> "BatchMeta":
        idx = list(indices)
        return BatchMeta(
            self.y[idx],
            self.d[idx],
            [self.slice_ids[i] for i in idx],
            [self.patient_ids[i] for i in idx],
        )


def similarity_matrix(z: Tensor, tau: float) -> Tensor:
    """Scaled Gram matrix S[a, b] = (z_a . z_b) / tau over unit rows."""
    if tau <= 0:
        raise ConfigError(f"tau must be positive, got {tau}")
    if z.data.ndim != 2:
        raise ContractError(f"expected a matrix of embeddings, got shape {z.shape}")
    norms = np.sqrt((z.data * z.data).sum(axis=1))
    if np.any(np.abs(norms - 1.0) > _UNIT_ROW_TOL):
        worst = float(np.abs(norms - 1.0).max())
        raise ContractError(f"embedding rows must be unit-norm (max deviation {worst:.3g})")
    return ad.mul_const(ad.matmul(z, ad.transpose(z)), 1.0 / tau)


def positive_set(meta: BatchMeta, t: int) -> set[int]:
    """Indices of other views sharing the anchor's weak label. May be empty."""
    if not 0 <= t < len(meta):
        raise ContractError(f"anchor index {t} out of range for batch of {len(meta)}")
    return {i for i in range(len(meta)) if i != t and meta.y[i] == meta.y[t]}


def _sibling_index(meta: BatchMeta) -> np.ndarray:
    """For each view, the unique other view of the same slice."""
    groups: dict = {}
    for i, sid in enumerate(meta.slice_ids):
        groups.setdefault(sid, []).append(i)
    sib = np.full(len(meta), -1, dtype=np.int64)
    for sid, members in groups.items():
        if len(members) != 2:
            raise ContractError(
                f"slice {sid!r} has {len(members)} view(s); infonce needs exactly two"
            )
        a, b = members
        sib[a], sib[b] = b, a
    return sib


def _pairwise_excluded_logsumexp(s: Tensor, exclude_anchor: bool) -> Tensor:
    """L[t, i] = logsumexp_j S[t, j] over j != i (and j != t when requested)."""
    m = s.shape[0]
    if m < (3 if exclude_anchor else 2):
        raise ContractError("denominator set empty at this batch size")
    x = np.broadcast_to(s.data[:, None, :], (m, m, m))
    mask = ~np.eye(m, dtype=bool)[None, :, :]  # j != i
    if exclude_anchor:
        mask = mask & ~np.eye(m, dtype=bool)[:, None, :]  # j != t
    mask = np.broadcast_to(mask, (m, m, m))
    neg_inf = np.float64(-np.inf)
    peak = np.where(mask, x, neg_inf).max(axis=2)
    shifted = np.where(mask, np.exp(x - peak[:, :, None]), 0.0)
    total = shifted.sum(axis=2)
    out = peak + np.log(total)

    def bwd(g):
        soft = shifted / total[:, :, None]
        return (np.einsum("ti,tij->tj", g, soft),)

    return ad.make_op(out, (s,), bwd, "pairwise_logsumexp")


def _normalized_weights(meta: BatchMeta, cfg: LossConfig, kind: str) -> np.ndarray:
    """Per-anchor weight rows, each summing to 1; skipped anchors are all-zero."""
    m = len(meta)
    not_self = ~np.eye(m, dtype=bool)
    if kind == "infonce":
        sib = _sibling_index(meta)
        raw = np.zeros((m, m))
        raw[np.arange(m), sib] = 1.0
    else:
        if kind == "depth_aware":
            eligible = not_self
        else:  # wsp, supcon share the label-gated positive set
            eligible = (meta.y[:, None] == meta.y[None, :]) & not_self
        if kind == "supcon":
            raw = eligible.astype(np.float64)
        else:
            diff = meta.d[:, None] - meta.d[None, :]
            gauss = np.exp(-(diff * diff) / (2.0 * cfg.sigma * cfg.sigma))
            raw = np.where(eligible, gauss, 0.0)
    totals = raw.sum(axis=1, keepdims=True)
    contributing = totals[:, 0] > 0.0
    safe = np.where(totals > 0.0, totals, 1.0)
    return np.where(contributing[:, None], raw / safe, 0.0)


def _kernel_loss_from_similarity(s: Tensor, meta: BatchMeta, cfg: LossConfig, kind: str) -> Tensor:
    m = len(meta)
    if s.data.ndim != 2 or s.shape != (m, m):
        raise ContractError(f"similarity matrix shape {s.shape} does not match batch of {m}")
    if m < 2:
        raise ContractError(f"need at least two views, got {m}")
    weights = _normalized_weights(meta, cfg, kind)
    if cfg.denominator_convention == "exclude_anchor" and m == 2:
        # Both pairs have an empty competitor set: every anchor is skipped.
        return Tensor(np.zeros(()))
    n_anchors = int(np.count_nonzero(weights.sum(axis=1) > 0.0))
    if n_anchors == 0:
        return Tensor(np.zeros(()))
    lse = _pairwise_excluded_logsumexp(s, cfg.denominator_convention == "exclude_anchor")
    per_pair = ad.mul(Tensor(weights), ad.sub(s, lse))
    return ad.mul_const(ad.sum_all(per_pair), -1.0 / n_anchors)


def loss_from_similarity(s: Tensor, meta: BatchMeta, cfg: LossConfig, kind: str | None = None) -> Tensor:
    """Evaluate a loss directly on a precomputed similarity matrix."""
    kind = cfg.loss_kind if kind is None else kind
    if kind not in LOSS_KINDS:
        raise ConfigError(f"unknown loss kind {kind!r}")
    return _kernel_loss_from_similarity(s, meta, cfg, kind)


def _loss(z: Tensor, meta: BatchMeta, cfg: LossConfig, kind: str) -> Tensor:
    if z.data.ndim != 2 or z.shape[0] != len(meta):
        raise ContractError(f"embeddings {z.shape} do not match batch of {len(meta)}")
    return _kernel_loss_from_similarity(similarity_matrix(z, cfg.tau), meta, cfg, kind)


def wsp_loss(z: Tensor, meta: BatchMeta, cfg: LossConfig) -> Tensor:
    return _loss(z, meta, cfg, "wsp")


def supcon_loss(z: Tensor, meta: BatchMeta, cfg: LossConfig) -> Tensor:
    return _loss(z, meta, cfg, "supcon")


def depth_aware_loss(z: Tensor, meta: BatchMeta, cfg: LossConfig) -> Tensor:
    return _loss(z, meta, cfg, "depth_aware")


def infonce_loss(z: Tensor, meta: BatchMeta, cfg: LossConfig) -> Tensor:
    return _loss(z, meta, cfg, "infonce")


LOSS_FUNCTIONS = {
    "wsp": wsp_loss,
    "supcon": supcon_loss,
    "depth_aware": depth_aware_loss,
    "infonce": infonce_loss,
}


def compute_loss(z: Tensor, meta: BatchMeta, cfg: LossConfig) -> Tensor:
    """Dispatch on ``cfg.loss_kind``."""
    return _loss(z, meta, cfg, cfg.loss_kind)


def random_batch(rng, max_views: int = 8, max_dim: int = 16):
    """Random raw embeddings and paired-view metadata for gradient checks."""
    n_slices = int(rng.integers(2, max_views // 2 + 1))
    dim = int(rng.integers(3, max_dim + 1))
    y = rng.integers(0, 4, size=n_slices)
    d = rng.random(n_slices)
    meta = BatchMeta(
        y=np.repeat(y, 2),
        d=np.repeat(d, 2),
        slice_ids=[f"s{i // 2}" for i in range(2 * n_slices)],
        patient_ids=[f"p{i // 2}" for i in range(2 * n_slices)],
    )
    x = rng.uniform(-1.0, 1.0, size=(2 * n_slices, dim))
    return x, meta


def gradient_check(
    seed: int = 0,
    n_batches: int = 20,
    kinds=LOSS_KINDS,
    convention: str = "exclude_anchor",
    eps: float = 1e-5,
) -> dict[str, float]:
    """Max relative error between backward() and central finite differences.

    The check differentiates each loss through row normalization of a raw
    embedding matrix, mirroring how losses see projection-head outputs.
    """
    results: dict[str, float] = {}
    for kind in kinds:
        cfg = LossConfig(tau=0.5, sigma=0.2, loss_kind=kind, denominator_convention=convention)
        worst = 0.0
        for b in range(n_batches):
            rng = np.random.default_rng(np.random.SeedSequence([seed, b]))
            x, meta = random_batch(rng)

            def f(t: Tensor) -> Tensor:
                return LOSS_FUNCTIONS[kind](ad.l2_normalize(t), meta, cfg)

            leaf = Tensor(x, requires_grad=True)
            ad.backward(f(leaf))
            numeric = ad.finite_diff_gradient(f, Tensor(x), eps).data
            worst = max(worst, ad.max_relative_error(leaf.grad, numeric))
        results[kind] = worst
    return results
