"""K-means clustering and optimal label alignment.

Both are support routines: k-means seeds the emission parameters during
initialization, and the assignment solver aligns estimated discrete
states with ground truth for segmentation scoring.
"""

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import NonSquareConfusion, TooFewPoints


def _kmeans_pp_centers(points, k, rng):
    """k-means++ seeding: spread the initial centers by sampling
    proportionally to squared distance from the chosen set."""
    n = points.shape[0]
    centers = np.empty((k, points.shape[1]), dtype=np.float64)
    idx = rng.integers(n)
    centers[0] = points[idx]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for i in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            centers[i:] = points[rng.integers(n, size=k - i)]
            break
        probs = d2 / total
        idx = rng.choice(n, p=probs)
        centers[i] = points[idx]
        d2 = np.minimum(d2, ((points - centers[i]) ** 2).sum(axis=1))
    return centers


def _lloyd(points, centers, max_iter=100):
    """Lloyd iterations; the within-cluster objective never increases."""
    k = centers.shape[0]
    labels = None
    history = []
    for _ in range(max_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = d2.argmin(axis=1)
        history.append(d2[np.arange(points.shape[0]), new_labels].sum())
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            mask = labels == c
            if mask.any():
                centers[c] = points[mask].mean(axis=0)
    return labels, centers, history[-1], history


def kmeans(points, k, seed, n_restarts=10, max_iter=100):
    """Cluster ``points`` into ``k`` groups.

    Uses k-means++ seeding with ``n_restarts`` independent restarts and
    keeps the best objective.  Deterministic given ``seed``.

    Returns (labels, centers).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be a 2-d array")
    n = points.shape[0]
    if k < 1:
        raise TooFewPoints("k must be >= 1")
    if k > n:
        raise TooFewPoints(f"k={k} exceeds number of points n={n}")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_restarts):
        centers0 = _kmeans_pp_centers(points, k, rng)
        labels, centers, objective, _ = _lloyd(points, centers0, max_iter)
        if best is None or objective < best[2]:
            best = (labels, centers, objective)
    return best[0], best[1]


def kmeans_objective(points, labels, centers):
    points = np.asarray(points, dtype=np.float64)
    return float(((points - centers[labels]) ** 2).sum())


def munkres_align(confusion):
    """Permutation of predicted labels maximizing the confusion-matrix trace.

    ``confusion[i, j]`` counts timesteps with true label ``i`` and
    predicted label ``j``.  Returns ``perm`` with ``perm[j]`` the true
    label matched to predicted label ``j``.
    """
    c = np.asarray(confusion, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise NonSquareConfusion(f"confusion matrix must be square, got {c.shape}")
    if np.any(c < 0):
        raise ValueError("confusion matrix entries must be non-negative")
    rows, cols = linear_sum_assignment(c, maximize=True)
    perm = np.empty(c.shape[0], dtype=np.int64)
    perm[cols] = rows
    return perm
