"""Geometry kernels with a compiled fast path.

The compiled Cython extension is preferred; the numpy reference is selected
at import time when the extension is missing. ``UPL_KERNELS=reference`` or
``UPL_KERNELS=compiled`` forces a backend (the latter raises if the
extension was not built). Both backends are bit-identical by contract.
"""

import os

import numpy as np

from upl.kernels import reference as _reference

_requested = os.environ.get("UPL_KERNELS", "auto")
if _requested not in ("auto", "compiled", "reference"):
    raise ValueError(f"UPL_KERNELS must be auto|compiled|reference, got {_requested!r}")

if _requested == "reference":
    _impl = _reference
    COMPILED = False
else:
    try:
        from upl.kernels import _core as _impl

        COMPILED = True
    except ImportError:
        if _requested == "compiled":
            raise
        _impl = _reference
        COMPILED = False

BACKEND = "compiled" if COMPILED else "reference"


def _as_coords(coords) -> np.ndarray:
    coords = np.ascontiguousarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3:
        raise ValueError(f"coords must be (n, 3), got {coords.shape}")
    if coords.shape[0] == 0:
        raise ValueError("empty point set")
    return coords


def farthest_point_sampling(coords, k: int, backend=None) -> np.ndarray:
    """Greedy max-min selection of ``min(k, n)`` point indices.

    The seed is the point farthest from the centroid; ties (here and at
    every greedy step) go to the lowest index. Deterministic.
    """
    coords = _as_coords(coords)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n = coords.shape[0]
    k = min(int(k), n)
    centroid = coords.mean(axis=0)
    dx = coords[:, 0] - centroid[0]
    dy = coords[:, 1] - centroid[1]
    dz = coords[:, 2] - centroid[2]
    seed = int(np.argmax(dx * dx + dy * dy + dz * dz))
    impl = _backend_module(backend)
    return np.asarray(impl.greedy_maxmin(coords, k, seed))


def knn_indices(coords, k: int, backend=None) -> np.ndarray:
    """(n, min(k, n)) indices of each point's nearest neighbors, self included."""
    coords = _as_coords(coords)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    k = min(int(k), coords.shape[0])
    impl = _backend_module(backend)
    return np.asarray(impl.knn_indices(coords, k))


def _backend_module(backend):
    if backend is None:
        return _impl
    if backend == "reference":
        return _reference
    if backend == "compiled":
        if not COMPILED:
            raise RuntimeError("compiled kernels are not available")
        from upl.kernels import _core

        return _core
    raise ValueError(f"unknown backend {backend!r}")
