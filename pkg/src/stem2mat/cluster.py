"""Small deterministic k-means used for intensity levels and dataset splits.

Initialization is quantile-based (points ordered along their dominant
variance direction, split into k contiguous blocks) so repeated runs give
identical results with no random restarts.
"""

from __future__ import annotations

import numpy as np

from .errors import TooFewItems


def _order_projection(points: np.ndarray) -> np.ndarray:
    """Deterministic 1-D ordering score for (N, D) points."""
    if points.shape[1] == 1:
        return points[:, 0]
    centered = points - points.mean(axis=0)
    # leading right singular vector; sign fixed by its largest component
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axis = vt[0]
    pivot = np.argmax(np.abs(axis))
    if axis[pivot] < 0:
        axis = -axis
    return centered @ axis


def kmeans(points: np.ndarray, k: int, max_iter: int = 100):
    """Cluster (N, D) points into k groups.

    Returns ``(centers, labels, sse)`` with centers ordered by their
    position along the dominant variance direction. Ties in assignment go
    to the lower-index center.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[:, None]
    n = len(pts)
    if k < 1:
        raise ValueError("k must be >= 1")
    if n < k:
        raise TooFewItems(f"{n} points cannot form {k} clusters")

    order = np.argsort(_order_projection(pts), kind="stable")
    blocks = np.array_split(order, k)
    centers = np.array([pts[b].mean(axis=0) for b in blocks])

    labels = np.zeros(n, dtype=int)
    for _ in range(max_iter):
        d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_labels = np.argmin(d2, axis=1)
        if np.array_equal(new_labels, labels) and _ > 0:
            break
        labels = new_labels
        for j in range(k):
            member = labels == j
            if member.any():
                centers[j] = pts[member].mean(axis=0)
            else:
                # reseed an empty cluster at the point farthest from its center
                far = np.argmax(d2[np.arange(n), labels])
                centers[j] = pts[far]
                labels[far] = j
    d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    sse = float(d2[np.arange(n), labels].sum())

    # canonical center order along the dominant direction
    rank = np.argsort(_order_projection(centers), kind="stable")
    remap = np.empty(k, dtype=int)
    remap[rank] = np.arange(k)
    return centers[rank], remap[labels], sse
