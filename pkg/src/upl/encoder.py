"""Trainable per-point feature encoder and token-set construction.

The encoder is a three-layer pointwise network with a local-context branch:
the second hidden layer is concatenated with the mean of each point's k
nearest neighbors (brute-force kNN over coordinates) before the final
projection, so the whole map stays permutation-equivariant.
"""

from dataclasses import dataclass

import numpy as np

from upl import autodiff as ad
from upl import kernels
from upl.autodiff import Tensor
from upl.data import PointCloud
from upl.nn import Linear


@dataclass
class FeatureMap:
    features: Tensor  # (n, d_f)
    scene_id: str = ""

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d_f(self) -> int:
        return self.features.shape[1]


@dataclass
class TokenSet:
    tokens: Tensor  # (d_f, n_tok)
    scene_id: str = ""

    @property
    def d(self) -> int:
        return self.tokens.shape[0]

    @property
    def n_tok(self) -> int:
        return self.tokens.shape[1]


def standardize_points(points: np.ndarray) -> np.ndarray:
    """Center each column and scale coordinates by their RMS spread.

    Permutation-invariant scene conditioning that keeps the first tanh layer
    out of saturation regardless of the scene's absolute position or extent.
    Color columns (if any) are centered but not rescaled; degenerate scenes
    (a single location) pass through centered.
    """
    pts = np.asarray(points, dtype=np.float64)
    centered = pts - pts.mean(axis=0, keepdims=True)
    scale = np.sqrt(np.mean(centered[:, :3] ** 2))
    if scale <= 0.0:
        scale = 1.0
    out = centered.copy()
    out[:, :3] /= scale
    return out


class PointEncoder:
    def __init__(self, d_in: int, d_f: int, rng: np.random.Generator, hidden: int = 64, k_neighbors: int = 8):
        if k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        self.d_in, self.d_f, self.k_neighbors = d_in, d_f, k_neighbors
        self.l1 = Linear(d_in, hidden, rng)
        self.l2 = Linear(hidden, hidden, rng)
        self.l3 = Linear(2 * hidden, d_f, rng)

    def __call__(self, cloud: PointCloud) -> FeatureMap:
        x = Tensor(standardize_points(cloud.points))
        h = ad.tanh(self.l1(x))
        h = ad.tanh(self.l2(h))
        idx = kernels.knn_indices(cloud.coords, self.k_neighbors)
        context = ad.neighbor_mean(h, idx)
        return FeatureMap(self.l3(ad.concat([h, context], axis=1)), scene_id=cloud.scene_id)

    def parameters(self):
        out = {}
        for name, layer in (("l1", self.l1), ("l2", self.l2), ("l3", self.l3)):
            for key, tensor in layer.parameters().items():
                out[f"{name}.{key}"] = tensor
        return out


def build_tokens(fmap: FeatureMap, coords: np.ndarray, n_tok: int) -> TokenSet:
    """Stack the features of n_tok FPS-selected points as (d_f, n_tok) columns.

    When the scene has fewer than n_tok points the remaining columns are
    zero. Deterministic given coordinates and n_tok.
    """
    if n_tok < 1:
        raise ValueError("n_tok must be >= 1")
    selected = kernels.farthest_point_sampling(coords, n_tok)
    feats = ad.take_rows(fmap.features, selected)
    if len(selected) < n_tok:
        pad = Tensor(np.zeros((n_tok - len(selected), fmap.d_f)))
        feats = ad.concat([feats, pad], axis=0)
    return TokenSet(ad.transpose(feats), scene_id=fmap.scene_id)


def build_merged_tokens(fmaps, coords_list, n_tok: int) -> TokenSet:
    """Token set over the union of several scenes (FPS over all coordinates)."""
    merged = FeatureMap(ad.concat([f.features for f in fmaps], axis=0), scene_id="merged")
    return build_tokens(merged, np.concatenate([np.asarray(c) for c in coords_list], axis=0), n_tok)
