"""Independent reference implementations used as test oracles.

Everything here is deliberately naive (explicit loops, textbook formulas) and
shares no code with the package, so agreement is meaningful.
"""

import math

import numpy as np


def naive_kernel_loss(z, y, d, slice_ids, tau, sigma, kind, convention="exclude_anchor"):
    """Direct triple-loop enumeration of the kernel-weighted contrastive loss.

    For every anchor t: collect its positives and raw weights per ``kind``,
    normalize the weights, and sum -w * log(exp(s_ti) / sum_j exp(s_tj)) with
    j ranging over the convention's denominator set. Anchors with no positive
    mass (or no pair with a non-empty denominator) are skipped and excluded
    from the final mean.
    """
    z = np.asarray(z, dtype=np.float64)
    m = len(y)
    s = z @ z.T / tau
    siblings = {}
    groups = {}
    for i, sid in enumerate(slice_ids):
        groups.setdefault(sid, []).append(i)
    for members in groups.values():
        if len(members) == 2:
            a, b = members
            siblings[a], siblings[b] = b, a
    total = 0.0
    contributing = 0
    for t in range(m):
        if kind in ("wsp", "supcon"):
            positives = [i for i in range(m) if i != t and y[i] == y[t]]
        elif kind == "depth_aware":
            positives = [i for i in range(m) if i != t]
        elif kind == "infonce":
            positives = [siblings[t]] if t in siblings else []
        else:
            raise ValueError(kind)
        if kind in ("wsp", "depth_aware"):
            weights = {
                i: math.exp(-((d[t] - d[i]) ** 2) / (2.0 * sigma * sigma)) for i in positives
            }
        else:
            weights = {i: 1.0 for i in positives}
        weight_sum = sum(weights.values())
        if not positives or weight_sum <= 0.0:
            continue
        anchor_total = 0.0
        any_pair = False
        for i in positives:
            denom = [
                j
                for j in range(m)
                if j != i and (convention == "literal_paper" or j != t)
            ]
            if not denom:
                continue
            any_pair = True
            lse = math.log(sum(math.exp(s[t, j]) for j in denom))
            anchor_total += (weights[i] / weight_sum) * (s[t, i] - lse)
        if not any_pair:
            continue
        contributing += 1
        total += anchor_total
    if contributing == 0:
        return 0.0
    return -total / contributing


def brute_force_auc(scores, labels):
    """Pairwise comparison count: P(s+ > s-) + P(s+ = s-) / 2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    wins = 0.0
    for sp in pos:
        for sn in neg:
            if sp > sn:
                wins += 1.0
            elif sp == sn:
                wins += 0.5
    return wins / (len(pos) * len(neg))


def make_meta(y, d, slice_ids=None, patient_ids=None):
    """Convenience constructor for loss metadata in tests."""
    from wsp.losses import BatchMeta

    n = len(y)
    if slice_ids is None:
        slice_ids = [f"s{i}" for i in range(n)]
    if patient_ids is None:
        patient_ids = [f"p{i}" for i in range(n)]
    return BatchMeta(y=y, d=d, slice_ids=slice_ids, patient_ids=patient_ids)


def paired_random_batch(rng, n_slices, dim, n_classes=4):
    """Two unit-normalized views per slice plus matching metadata arrays."""
    y = rng.integers(0, n_classes, size=n_slices)
    d = rng.random(n_slices)
    z = rng.normal(size=(2 * n_slices, dim))
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    meta = make_meta(
        y=np.repeat(y, 2),
        d=np.repeat(d, 2),
        slice_ids=[f"s{i // 2}" for i in range(2 * n_slices)],
        patient_ids=[f"p{i // 2}" for i in range(2 * n_slices)],
    )
    return z, meta
