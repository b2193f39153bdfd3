"""Frozen-representation probing: logistic probe, CV, metrics, PCA, sigma sweep.

The probe is a full-batch damped Newton solve of L2-regularized logistic
regression, run to a gradient-norm tolerance so results are deterministic.
Headline metrics are computed at the patient level by averaging per-slice
probabilities within each patient; slice-level AUC is also reported for
diagnostics.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import Tensor
from .encoders import EncoderCheckpoint
from .errors import ConfigError, ContractError, DegenerateInputError
from .training import OptimConfig, pretrain


@dataclass(frozen=True)
class ProbeConfig:
    l2_strength: float = 1.0
    max_iterations: int = 200
    tolerance: float = 1e-8
    folds: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.l2_strength < 0:
            raise ConfigError("l2_strength must be >= 0")
        if self.folds < 2:
            raise ConfigError("folds must be >= 2")
        if self.max_iterations < 1 or self.tolerance <= 0:
            raise ConfigError("max_iterations must be >= 1 and tolerance > 0")


@dataclass
class RepresentationTable:
    patient_ids: list
    slice_ids: list
    d: np.ndarray
    y_weak: np.ndarray
    y_strong: np.ndarray  # -1 where the strong label is absent
    repr: np.ndarray = field(repr=False)  # n x D

    def __len__(self) -> int:
        return len(self.slice_ids)


@dataclass
class ProbeReport:
    fold_auc_patient: list
    fold_auc_slice: list
    fold_bacc: list
    mean_auc_patient: float
    std_auc_patient: float
    mean_auc_slice: float
    mean_bacc: float
    std_bacc: float
    patient_probabilities: dict
    patient_labels: dict
    config: ProbeConfig


def extract_representations(ckpt: EncoderCheckpoint, volumes, batch_size: int = 128) -> RepresentationTable:
    """Representation vectors for every retained slice, augmentation off."""
    enc = ckpt.to_encoder()
    patient_ids: list = []
    slice_ids: list = []
    depth: list = []
    y_weak: list = []
    y_strong: list = []
    images: list = []
    for vol in volumes:
        for s in vol.slices:
            patient_ids.append(vol.patient_id)
            slice_ids.append(f"{vol.volume_id}/{s.p}")
            depth.append(s.d)
            y_weak.append(vol.y_weak)
            y_strong.append(-1 if vol.y_strong is None else int(vol.y_strong))
            images.append(np.asarray(s.pixels, dtype=np.float64))
    if not images:
        raise ContractError("no retained slices to embed")
    chunks = []
    for start in range(0, len(images), batch_size):
        block = np.stack(images[start : start + batch_size])
        if enc.config.arch == "mlp":
            x = Tensor(block.reshape(len(block), -1))
        else:
            x = Tensor(block[:, None, :, :])
        chunks.append(enc.encode(x).data)
    return RepresentationTable(
        patient_ids=patient_ids,
        slice_ids=slice_ids,
        d=np.asarray(depth),
        y_weak=np.asarray(y_weak, dtype=np.int64),
        y_strong=np.asarray(y_strong, dtype=np.int64),
        repr=np.concatenate(chunks, axis=0),
    )


# ---------------------------------------------------------------------------
# Logistic probe
# ---------------------------------------------------------------------------


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _probe_objective(x, y, w, b, lam):
    z = x @ w + b
    # softplus(z) - y z, stable for both signs of z
    ce = float(np.mean(np.logaddexp(0.0, z) - y * z))
    return ce + 0.5 * lam * float(w @ w)


def fit_logistic_probe(x: np.ndarray, y: np.ndarray, cfg: ProbeConfig, trace: list | None = None):
    """Damped Newton minimization of mean cross-entropy + (l2/n)||w||^2 / 2.

    The bias is unregularized. Backtracking halves the step until the
    objective decreases, so the iterate sequence is monotone. When ``trace``
    is a list the accepted objective values are appended to it.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or len(x) != len(y):
        raise ContractError(f"bad probe inputs: X {x.shape}, y {y.shape}")
    classes = np.unique(y)
    if len(classes) < 2:
        raise ContractError("probe needs both classes present")
    n, dim = x.shape
    lam = cfg.l2_strength / n
    w = np.zeros(dim)
    b = 0.0
    obj = _probe_objective(x, y, w, b, lam)
    if trace is not None:
        trace.append(obj)
    for _ in range(cfg.max_iterations):
        z = x @ w + b
        p = _sigmoid(z)
        grad_w = x.T @ (p - y) / n + lam * w
        grad_b = float(np.mean(p - y))
        grad_norm = max(float(np.abs(grad_w).max(initial=0.0)), abs(grad_b))
        if grad_norm <= cfg.tolerance:
            break
        dvec = p * (1.0 - p)
        h = np.empty((dim + 1, dim + 1))
        xd = x * dvec[:, None]
        h[:dim, :dim] = x.T @ xd / n + lam * np.eye(dim)
        h[:dim, dim] = xd.sum(axis=0) / n
        h[dim, :dim] = h[:dim, dim]
        h[dim, dim] = float(dvec.mean())
        g = np.concatenate([grad_w, [grad_b]])
        try:
            step = np.linalg.solve(h + 1e-12 * np.eye(dim + 1), g)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(h, g, rcond=None)[0]
        scale = 1.0
        for _ in range(60):
            w_new = w - scale * step[:dim]
            b_new = b - scale * step[dim]
            obj_new = _probe_objective(x, y, w_new, b_new, lam)
            if obj_new < obj:
                break
            scale *= 0.5
        else:
            break  # no descent direction left at float precision
        w, b, obj = w_new, float(b_new), obj_new
        if trace is not None:
            trace.append(obj)
    return w, b


def predict_probe(x: np.ndarray, w: np.ndarray, b: float) -> np.ndarray:
    return _sigmoid(np.asarray(x, dtype=np.float64) @ w + b)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def aggregate_patient(probabilities, patient_ids) -> dict:
    """Arithmetic mean of slice probabilities per patient."""
    probs = np.asarray(probabilities, dtype=np.float64)
    if len(probs) != len(patient_ids):
        raise ContractError("probabilities and patient ids must align")
    if np.any(probs < 0.0) or np.any(probs > 1.0):
        raise ContractError("probabilities must lie in [0, 1]")
    sums: dict = {}
    counts: dict = {}
    for pid, prob in zip(patient_ids, probs):
        sums[pid] = sums.get(pid, 0.0) + float(prob)
        counts[pid] = counts.get(pid, 0) + 1
    return {pid: sums[pid] / counts[pid] for pid in sums}


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores), dtype=np.float64)
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and scores[order[j + 1]] == scores[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores, labels) -> float:
    """Mann-Whitney statistic with tie correction: P(s+ > s-) + P(s+ = s-)/2."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ContractError("AUC needs both classes present")
    ranks = _average_ranks(scores)
    rank_sum = float(ranks[labels == 1].sum())
    return (rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def balanced_accuracy(probabilities, labels, threshold: float = 0.5) -> float:
    """(sensitivity + specificity) / 2 at the given probability threshold."""
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    pos = labels == 1
    neg = labels == 0
    if not pos.any() or not neg.any():
        raise ContractError("balanced accuracy needs both classes present")
    preds = probs >= threshold
    sensitivity = float(preds[pos].mean())
    specificity = float((~preds[neg]).mean())
    return 0.5 * (sensitivity + specificity)


def stratified_kfold(patient_ids, labels, k: int = 5, seed: int = 0) -> np.ndarray:
    """Fold index per patient; per-class counts across folds differ by <= 1."""
    labels = np.asarray(labels, dtype=np.int64)
    if len(labels) != len(patient_ids):
        raise ContractError("labels and patient ids must align")
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    folds = np.full(len(labels), -1, dtype=np.int64)
    for cls in sorted(set(labels.tolist())):
        idx = np.flatnonzero(labels == cls)
        if len(idx) < k:
            raise ContractError(f"class {cls} has {len(idx)} patients, fewer than {k} folds")
        idx = idx[rng.permutation(len(idx))]
        offset = int(rng.integers(k))
        for i, patient_idx in enumerate(idx):
            folds[patient_idx] = (offset + i) % k
    return folds


def pca_project(x: np.ndarray, modes: int = 2):
    """Mean-centered projection onto the leading covariance eigenvectors.

    Each component's sign is fixed by making its largest-magnitude coordinate
    positive. Returns (coordinates n x modes, explained-variance fractions).
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or len(x) < 3:
        raise ContractError(f"PCA needs an n x D matrix with n >= 3, got {x.shape}")
    centered = x - x.mean(axis=0, keepdims=True)
    cov = centered.T @ centered / (len(x) - 1)
    total = float(np.trace(cov))
    if total <= 0.0:
        raise DegenerateInputError("data has zero variance")
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:modes]
    components = eigvecs[:, order]
    for j in range(components.shape[1]):
        pivot = int(np.abs(components[:, j]).argmax())
        if components[pivot, j] < 0:
            components[:, j] = -components[:, j]
    coords = centered @ components
    explained = np.clip(eigvals[order], 0.0, None) / total
    return coords, explained


# ---------------------------------------------------------------------------
# Probe protocol and the sigma sweep
# ---------------------------------------------------------------------------


def _patient_table(table: RepresentationTable):
    patients = list(dict.fromkeys(table.patient_ids))
    labels = []
    for pid in patients:
        idx = table.patient_ids.index(pid)
        label = int(table.y_strong[idx])
        if label < 0:
            raise ContractError(f"patient {pid} lacks a strong label")
        labels.append(label)
    return patients, np.asarray(labels, dtype=np.int64)


def run_probe_protocol(ckpt: EncoderCheckpoint, volumes, cfg: ProbeConfig) -> ProbeReport:
    """Stratified k-fold linear probing with patient-level aggregation."""
    table = extract_representations(ckpt, volumes)
    return probe_representations(table, cfg)


def probe_representations(table: RepresentationTable, cfg: ProbeConfig, features: np.ndarray | None = None) -> ProbeReport:
    """Probe protocol on a precomputed table (features default to table.repr)."""
    x_all = table.repr if features is None else np.asarray(features, dtype=np.float64)
    if len(x_all) != len(table):
        raise ContractError("feature matrix does not match the representation table")
    patients, patient_labels = _patient_table(table)
    folds = stratified_kfold(patients, patient_labels, cfg.folds, cfg.seed)
    fold_of_patient = {pid: int(f) for pid, f in zip(patients, folds)}
    slice_folds = np.asarray([fold_of_patient[pid] for pid in table.patient_ids], dtype=np.int64)
    slice_labels = table.y_strong.astype(np.float64)
    fold_auc_patient: list[float] = []
    fold_auc_slice: list[float] = []
    fold_bacc: list[float] = []
    patient_probs: dict = {}
    for f in range(cfg.folds):
        train = slice_folds != f
        test = slice_folds == f
        w, b = fit_logistic_probe(x_all[train], slice_labels[train], cfg)
        probs = predict_probe(x_all[test], w, b)
        test_pids = [pid for pid, is_test in zip(table.patient_ids, test) if is_test]
        per_patient = aggregate_patient(probs, test_pids)
        patient_probs.update(per_patient)
        pids_sorted = sorted(per_patient)
        p_scores = np.asarray([per_patient[pid] for pid in pids_sorted])
        p_labels = np.asarray([patient_labels[patients.index(pid)] for pid in pids_sorted])
        fold_auc_patient.append(auc(p_scores, p_labels))
        fold_auc_slice.append(auc(probs, table.y_strong[test]))
        fold_bacc.append(balanced_accuracy(p_scores, p_labels))
    return ProbeReport(
        fold_auc_patient=fold_auc_patient,
        fold_auc_slice=fold_auc_slice,
        fold_bacc=fold_bacc,
        mean_auc_patient=float(np.mean(fold_auc_patient)),
        std_auc_patient=float(np.std(fold_auc_patient)),
        mean_auc_slice=float(np.mean(fold_auc_slice)),
        mean_bacc=float(np.mean(fold_bacc)),
        std_bacc=float(np.std(fold_bacc)),
        patient_probabilities=patient_probs,
        patient_labels={pid: int(lbl) for pid, lbl in zip(patients, patient_labels)},
        config=cfg,
    )


@dataclass
class SweepRow:
    sigma: float
    auc_mean: float
    auc_std: float
    fold_aucs: list


DEFAULT_SWEEP_SIGMAS = (0.01, 0.1, 0.2, 0.3, 0.5)


def sigma_sweep(
    volumes,
    enc_cfg,
    optim_cfg: OptimConfig,
    probe_cfg: ProbeConfig | None = None,
    sigmas=DEFAULT_SWEEP_SIGMAS,
    seeds=None,
    aug_cfg=None,
) -> list[SweepRow]:
    """Pretrain + probe per sigma with shared seeds; one row per sigma."""
    if not sigmas:
        raise ConfigError("sigma list must not be empty")
    probe_cfg = probe_cfg or ProbeConfig()
    seeds = list(seeds) if seeds is not None else [optim_cfg.seed]
    rows = []
    for sigma in sigmas:
        fold_aucs: list[float] = []
        for seed in seeds:
            loss_cfg = replace(optim_cfg.loss, sigma=float(sigma))
            run_cfg = replace(optim_cfg, loss=loss_cfg, seed=seed)
            enc_seeded = enc_cfg if enc_cfg.seed == seed else replace(enc_cfg, seed=seed)
            ckpt, _ = pretrain(volumes, enc_seeded, run_cfg, aug_cfg)
            report = run_probe_protocol(ckpt, volumes, probe_cfg)
            fold_aucs.extend(report.fold_auc_patient)
        rows.append(
            SweepRow(
                sigma=float(sigma),
                auc_mean=float(np.mean(fold_aucs)),
                auc_std=float(np.std(fold_aucs)),
                fold_aucs=fold_aucs,
            )
        )
    return rows


# ---------------------------------------------------------------------------
# CSV exports
# ---------------------------------------------------------------------------


def write_metrics_csv(path, method: str, sigma: float, report: ProbeReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("method,sigma,fold,auc_patient,auc_slice,bacc\n")
        for f in range(len(report.fold_auc_patient)):
            fh.write(
                f"{method},{float(sigma)!r},{f},"
                f"{float(report.fold_auc_patient[f])!r},"
                f"{float(report.fold_auc_slice[f])!r},"
                f"{float(report.fold_bacc[f])!r}\n"
            )


def write_embeddings_csv(path, table: RepresentationTable) -> None:
    dim = table.repr.shape[1]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("patient_id,slice_id,d,y_weak,y_strong," + ",".join(f"r{i}" for i in range(dim)) + "\n")
        for i in range(len(table)):
            row = ",".join(repr(float(v)) for v in table.repr[i])
            fh.write(
                f"{table.patient_ids[i]},{table.slice_ids[i]},{float(table.d[i])!r},"
                f"{int(table.y_weak[i])},{int(table.y_strong[i])},{row}\n"
            )


def write_pca_csv(path, table: RepresentationTable, coords: np.ndarray, explained: np.ndarray) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# explained_variance," + ",".join(repr(float(v)) for v in explained) + "\n")
        fh.write("patient_id,slice_id,d,y_strong,pc1,pc2\n")
        for i in range(len(table)):
            fh.write(
                f"{table.patient_ids[i]},{table.slice_ids[i]},{float(table.d[i])!r},"
                f"{int(table.y_strong[i])},{float(coords[i, 0])!r},{float(coords[i, 1])!r}\n"
            )


def write_sweep_csv(path, rows: list[SweepRow]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("sigma,auc_mean,auc_std\n")
        for row in rows:
            fh.write(f"{row.sigma!r},{row.auc_mean!r},{row.auc_std!r}\n")
