"""Rank correlation and clustering-quality metrics, plus a small k-means.

srcc/plcc return the DEGENERATE sentinel for constant inputs instead of
NaN so downstream code fails loudly if it tries arithmetic on them.
"""

from __future__ import annotations

import numpy as np


class _Degenerate:
    """Marker for correlations that are undefined on constant input."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "DEGENERATE"


DEGENERATE = _Degenerate()


def average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing the average of their positions."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="stable")
    ranks = np.empty(x.size, dtype=np.float64)
    i = 0
    while i < x.size:
        j = i
        while j + 1 < x.size and x[order[j + 1]] == x[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def plcc(pred, gt):
    """Pearson linear correlation; DEGENERATE when either input is constant."""
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(gt, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"need two equal-length vectors, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ValueError("correlation needs at least 2 points")
    da = a - a.mean()
    db = b - b.mean()
    var_a = float(da @ da)
    var_b = float(db @ db)
    if var_a == 0.0 or var_b == 0.0:
        return DEGENERATE
    return float((da @ db) / np.sqrt(var_a * var_b))


def srcc(pred, gt):
    """Spearman rank correlation with average ranks for ties."""
    a = np.asarray(pred, dtype=np.float64)
    b = np.asarray(gt, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"need two equal-length vectors, got {a.shape} and {b.shape}")
    if a.size < 2:
        raise ValueError("correlation needs at least 2 points")
    return plcc(average_ranks(a), average_ranks(b))


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def clustering_metrics(class_labels, cluster_labels) -> tuple[float, float, float]:
    """Entropy-based homogeneity, completeness, and V-measure in [0, 1].

    h = 1 - H(class|cluster)/H(class), c = 1 - H(cluster|class)/H(cluster),
    v = 2hc/(h+c). Zero entropies follow the usual conventions (perfectly
    pure side scores 1; v is 0 when h + c is 0).
    """
    y = np.asarray(class_labels)
    z = np.asarray(cluster_labels)
    if y.shape != z.shape or y.ndim != 1:
        raise ValueError(f"label vectors must match, got {y.shape} and {z.shape}")
    if y.size == 0:
        raise ValueError("empty label vectors")

    _, yi = np.unique(y, return_inverse=True)
    _, zi = np.unique(z, return_inverse=True)
    table = np.zeros((yi.max() + 1, zi.max() + 1))
    np.add.at(table, (yi, zi), 1.0)

    h_class = _entropy(table.sum(axis=1))
    h_cluster = _entropy(table.sum(axis=0))
    n = table.sum()

    h_class_given_cluster = 0.0
    for k in range(table.shape[1]):
        col = table[:, k]
        h_class_given_cluster += col.sum() / n * _entropy(col)
    h_cluster_given_class = 0.0
    for k in range(table.shape[0]):
        row = table[k, :]
        h_cluster_given_class += row.sum() / n * _entropy(row)

    homogeneity = 1.0 if h_class == 0.0 else 1.0 - h_class_given_cluster / h_class
    completeness = 1.0 if h_cluster == 0.0 else 1.0 - h_cluster_given_class / h_cluster
    if homogeneity + completeness == 0.0:
        v_measure = 0.0
    else:
        v_measure = 2.0 * homogeneity * completeness / (homogeneity + completeness)
    return float(homogeneity), float(completeness), float(v_measure)


def kmeans(points: np.ndarray, k: int, rng: np.random.Generator,
           restarts: int = 10, max_iter: int = 100) -> np.ndarray:
    """Lloyd's algorithm with several seeded restarts; returns the labeling
    with the lowest within-cluster sum of squares."""
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < k:
        raise ValueError(f"need at least k={k} points of equal dimension, got {x.shape}")
    best_labels = None
    best_inertia = np.inf
    for _ in range(restarts):
        centers = x[rng.choice(x.shape[0], size=k, replace=False)].copy()
        labels: np.ndarray | None = None
        for _it in range(max_iter):
            dists = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
            new_labels = dists.argmin(axis=1)
            if labels is not None and np.array_equal(new_labels, labels):
                break
            labels = new_labels
            for c in range(k):
                mask = labels == c
                if mask.any():
                    centers[c] = x[mask].mean(axis=0)
        inertia = float(((x - centers[labels]) ** 2).sum())
        if inertia < best_inertia:
            best_inertia = inertia
            best_labels = labels.copy()
    return best_labels
