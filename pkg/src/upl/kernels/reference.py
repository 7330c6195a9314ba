"""Numpy reference implementations of the geometry kernels.

These are the fallback used when the compiled extension is unavailable.
Both backends must produce identical output bit for bit: squared Euclidean
distances are accumulated as dx*dx + dy*dy + dz*dz in float64, and every
tie is broken by the lowest point index.
"""

import numpy as np


def _sqdist_to(coords: np.ndarray, idx: int) -> np.ndarray:
    dx = coords[:, 0] - coords[idx, 0]
    dy = coords[:, 1] - coords[idx, 1]
    dz = coords[:, 2] - coords[idx, 2]
    return dx * dx + dy * dy + dz * dz


def greedy_maxmin(coords: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Greedy max-min selection of k indices starting from a given seed.

    Each pick maximizes the minimum squared distance to the already-selected
    set; ties go to the lowest index (first argmax).
    """
    selected = np.empty(k, dtype=np.int64)
    selected[0] = seed
    best = _sqdist_to(coords, seed)
    for i in range(1, k):
        nxt = int(np.argmax(best))
        selected[i] = nxt
        np.minimum(best, _sqdist_to(coords, nxt), out=best)
    return selected


def knn_indices(coords: np.ndarray, k: int) -> np.ndarray:
    """Indices of the k nearest points (self included) for every point.

    Returns an (n, k) int64 array; each row is ordered by squared distance,
    ties by lowest index.
    """
    n = coords.shape[0]
    out = np.empty((n, k), dtype=np.int64)
    for i in range(n):
        d2 = _sqdist_to(coords, i)
        out[i] = np.argsort(d2, kind="stable")[:k]
    return out
