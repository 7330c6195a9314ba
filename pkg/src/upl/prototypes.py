"""Class prototype construction via farthest point sampling.

A prototype set carries one d-vector per class through the pipeline stages
raw -> refined -> fused1 -> fused2. Classes without points are zero rows
flagged invalid; they stay exactly zero at every stage and are excluded
from every average.
"""

from dataclasses import dataclass

import numpy as np

from upl import autodiff as ad
from upl import kernels
from upl.autodiff import Tensor
from upl.encoder import FeatureMap

STAGES = ("raw", "refined", "fused1", "fused2")


@dataclass
class PrototypeSet:
    prototypes: Tensor  # (C, d)
    stage: str
    class_ids: list
    valid_mask: np.ndarray

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)
        if self.prototypes.shape[0] != len(self.class_ids) or len(self.class_ids) != len(self.valid_mask):
            raise ValueError("prototypes, class_ids and valid_mask must agree on C")

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    @property
    def d(self) -> int:
        return self.prototypes.shape[1]

    def valid_column(self) -> Tensor:
        """(C, 1) constant 0/1 mask for zeroing invalid rows on the tape."""
        return Tensor(self.valid_mask.astype(np.float64)[:, None])


def farthest_point_sampling(coords, k: int) -> np.ndarray:
    """Greedy max-min point selection (see upl.kernels for the contract)."""
    return kernels.farthest_point_sampling(coords, k)


def class_masks_from_labels(labels: np.ndarray, n_classes: int) -> list:
    """Masks for classes 0..n_classes-1 from a dense label vector."""
    return [np.asarray(labels) == c for c in range(n_classes)]


def _class_prototype(features: Tensor, coords: np.ndarray, idx: np.ndarray, m_sub: int) -> Tensor:
    """(1, d) mean of sub-prototype means for one class's points."""
    if m_sub == 1 or len(idx) == 1:
        rows = ad.take_rows(features, idx)
        return ad.tsum(rows, axis=0, keepdims=True) / float(len(idx))
    anchors = kernels.farthest_point_sampling(coords[idx], m_sub)
    anchor_xyz = coords[idx][anchors]
    diff = coords[idx][:, None, :] - anchor_xyz[None, :, :]
    assign = np.argmin(np.einsum("pad,pad->pa", diff, diff), axis=1)
    means = []
    for a in range(len(anchors)):
        members = idx[assign == a]
        if members.size == 0:
            continue  # duplicate anchor swallowed by a lower-index one
        rows = ad.take_rows(features, members)
        means.append(ad.tsum(rows, axis=0, keepdims=True) / float(members.size))
    return ad.tmean(ad.concat(means, axis=0), axis=0, keepdims=True)


def build_raw_prototypes(fmap: FeatureMap, coords: np.ndarray, masks, m_sub: int = 1) -> PrototypeSet:
    """Raw per-class prototypes by FPS-anchored sub-prototype averaging.

    Per class: FPS picks m_sub anchor points among the class's points, each
    class point joins its nearest anchor, group feature means are averaged
    into the class prototype. With m_sub=1 this is exactly masked average
    pooling. Empty classes become zero rows with valid_mask False.
    """
    if m_sub < 1:
        raise ValueError("m_sub must be >= 1")
    coords = np.asarray(coords, dtype=np.float64)
    masks = [np.asarray(m, dtype=bool) for m in masks]
    if not any(m.any() for m in masks):
        raise ValueError("all class masks are empty")
    d = fmap.d_f
    rows, valid = [], []
    for mask in masks:
        idx = np.flatnonzero(mask)
        if idx.size == 0:
            rows.append(Tensor(np.zeros((1, d))))
            valid.append(False)
        else:
            rows.append(_class_prototype(fmap.features, coords, idx, m_sub))
            valid.append(True)
    return PrototypeSet(
        prototypes=ad.concat(rows, axis=0),
        stage="raw",
        class_ids=list(range(len(masks))),
        valid_mask=np.asarray(valid),
    )


def merge_support_prototypes(per_shot) -> PrototypeSet:
    """Per-class mean over shots, counting only shots where the class is valid."""
    if not per_shot:
        raise ValueError("need at least one prototype set")
    first = per_shot[0]
    for ps in per_shot:
        if ps.class_ids != first.class_ids:
            raise ValueError("prototype sets disagree on class ids")
        if ps.stage != "raw":
            raise ValueError(f"can only merge raw prototypes, got stage {ps.stage!r}")
    if len(per_shot) == 1:
        return per_shot[0]
    rows, valid = [], []
    for c in range(first.n_classes):
        contrib = [ps for ps in per_shot if ps.valid_mask[c]]
        if not contrib:
            rows.append(Tensor(np.zeros((1, first.d))))
            valid.append(False)
        else:
            stack = ad.concat([ad.narrow(ps.prototypes, 0, c, 1) for ps in contrib], axis=0)
            rows.append(ad.tmean(stack, axis=0, keepdims=True))
            valid.append(True)
    return PrototypeSet(ad.concat(rows, axis=0), "raw", first.class_ids, np.asarray(valid))
