"""Continual-learning accuracy and class-feature comparison metrics.

Distribution metrics fit a diagonal Gaussian to each class's features
(population variance plus a 1e-6 floor) and use closed forms.
"""
from __future__ import annotations

import csv

import numpy as np

from .errors import ContractViolation, DegenerateInputError

VARIANCE_FLOOR = 1e-6


def accuracy_matrix(num_tasks, rows=None):
    """Empty ``(rows, num_tasks)`` matrix; NaN marks entries not yet measured."""
    return np.full((num_tasks if rows is None else rows, num_tasks), np.nan)


def avg_acc(A):
    """Mean accuracy over all tasks after the final task (last row of ``A``)."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    final = A[-1]
    if final.size == 0 or np.isnan(final).any():
        raise ContractViolation("the final row of the accuracy matrix is incomplete")
    return float(final.mean())


def forgetting(A):
    """Per-task drop from the best earlier accuracy to the final one (tasks 1..T-1)."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    T = A.shape[1]
    if A.shape[0] < 2:
        return np.zeros(max(T - 1, 0))
    return np.array([np.nanmax(A[:-1, i]) - A[-1, i] for i in range(T - 1)])


def _rows(z):
    z = np.asarray(z, dtype=np.float64)
    return z.reshape(len(z), -1)


def mean_pairwise_cosine(set_c, set_d):
    a, b = _rows(set_c), _rows(set_d)
    if len(a) == 0 or len(b) == 0:
        raise ContractViolation("cosine needs non-empty sets")
    na, nb = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    if (na == 0).any() or (nb == 0).any():
        raise DegenerateInputError("cosine of a zero vector")
    return float(((a / na[:, None]) @ (b / nb[:, None]).T).mean())


def fit_diagonal_gaussian(z):
    z = _rows(z)
    if len(z) < 2:
        raise ContractViolation("fitting a Gaussian needs at least two samples")
    return z.mean(axis=0), z.var(axis=0) + VARIANCE_FLOOR


def gaussian_kl(set_c, set_d):
    """KL(P_c || P_d) between the fitted diagonal Gaussians."""
    mc, vc = fit_diagonal_gaussian(set_c)
    md, vd = fit_diagonal_gaussian(set_d)
    return float(0.5 * np.sum(np.log(vd / vc) + (vc + (mc - md) ** 2) / vd - 1.0))


def gaussian_w2(set_c, set_d):
    """2-Wasserstein distance between the fitted diagonal Gaussians."""
    mc, vc = fit_diagonal_gaussian(set_c)
    md, vd = fit_diagonal_gaussian(set_d)
    return float(np.sqrt(np.sum((mc - md) ** 2) + np.sum((np.sqrt(vc) - np.sqrt(vd)) ** 2)))


def mean_feature_distance(set_c, set_d):
    a, b = _rows(set_c), _rows(set_d)
    if len(a) == 0 or len(b) == 0:
        raise ContractViolation("feature distance needs non-empty sets")
    diff = a[:, None, :] - b[None, :, :]
    return float(np.sqrt((diff ** 2).sum(axis=-1)).mean())


PAIR_METRICS = {
    "cos": mean_pairwise_cosine,
    "kl": gaussian_kl,
    "w2": gaussian_w2,
    "fdist": mean_feature_distance,
}


def class_pair_table(features, labels):
    """All four metrics for every ordered pair of distinct classes.

    Features are first divided by their root-mean-square norm so tables
    from differently scaled models are comparable.
    """
    z = _rows(features)
    labels = np.asarray(labels)
    rms = np.sqrt((z ** 2).sum(axis=1).mean()) if len(z) else 1.0
    z = z / (rms if rms > 0 else 1.0)
    classes = np.unique(labels)
    groups = {int(c): z[labels == c] for c in classes}
    table = {}
    for c in groups:
        for d in groups:
            if c != d:
                table[(c, d)] = {name: fn(groups[c], groups[d]) for name, fn in PAIR_METRICS.items()}
    return table


def dispersion_gap(table, reference):
    """Mean absolute difference between two class-pair tables, per metric."""
    pairs = sorted(set(table) & set(reference))
    if not pairs:
        raise ContractViolation("no class pairs in common with the reference")
    return {name: float(np.mean([abs(table[p][name] - reference[p][name]) for p in pairs]))
            for name in PAIR_METRICS}


def export_features(model, dataset, path):
    """Write ``class_id,z0,...`` rows of final-encoder features in eval mode."""
    width = model.config.layer_sizes[-1]
    feats = model.features(dataset.features) if len(dataset) else np.zeros((0, width), np.float32)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["class_id"] + [f"z{i}" for i in range(width)])
        for label, row in zip(dataset.labels, feats):
            writer.writerow([int(label)] + [format(float(v), ".9g") for v in row])


def read_features(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = [r for r in reader if r]
    labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
    feats = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)
    return feats, labels
