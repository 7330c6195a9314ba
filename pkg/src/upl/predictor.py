"""Similarity logits, Monte Carlo ensemble prediction and uncertainty maps.

Per-point logits are temperature-scaled cosine similarities to the class
prototypes. At test time T latent samples each produce a softmax output and
the ensemble probability is their mean (probability averaging, not logit
averaging). Uncertainty combines the across-sample probability variance
with the entropy of the mean distribution, each min-max normalized per
scene and averaged.
"""

from dataclasses import dataclass

import numpy as np

from upl import autodiff as ad
from upl.autodiff import Tensor
from upl.prototypes import PrototypeSet
from upl.variational import GaussianPrototype, fuse_beta, reparameterize


@dataclass
class PredictionOutput:
    probs: np.ndarray  # (n, C), rows sum to 1
    per_sample_logits: np.ndarray  # (T, n, C)
    predicted_labels: np.ndarray  # (n,)
    variance_map: np.ndarray = None
    entropy_map: np.ndarray = None
    fused_uncertainty: np.ndarray = None

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    @property
    def n_classes(self) -> int:
        return self.probs.shape[1]

    @property
    def n_samples(self) -> int:
        return self.per_sample_logits.shape[0]


def similarity_logits(features, protos: PrototypeSet, temperature: float = 0.1) -> Tensor:
    """Cosine similarity of each point feature to each prototype, over temperature.

    Zero feature rows and zero (invalid) prototypes get cosine 0 by
    convention.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    feats = features if isinstance(features, Tensor) else features.features
    return ad.cosine_rows(feats, protos.prototypes) / float(temperature)


def mc_predict(fmap, prior: GaussianPrototype, p1: PrototypeSet, gate, T: int, rng, temperature: float = 0.1) -> PredictionOutput:
    """Ensemble prediction from T prior samples.

    Each sample is fused into the deterministic prototype, scored against
    the query features and softmax-normalized; the ensemble probability is
    the mean of the T softmax outputs (accumulated in sample order).
    """
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    feats = fmap if isinstance(fmap, Tensor) else fmap.features
    logits_per_sample = []
    prob_sum = None
    for t in range(T):
        z = reparameterize(prior, rng=rng, sample_index=t)
        p2 = fuse_beta(p1, z, gate)
        logits = similarity_logits(feats, p2, temperature)
        probs = ad.softmax(logits, axis=-1)
        logits_per_sample.append(logits.data.copy())
        prob_sum = probs.data.copy() if prob_sum is None else prob_sum + probs.data
    mean_probs = prob_sum / T
    out = PredictionOutput(
        probs=mean_probs,
        per_sample_logits=np.stack(logits_per_sample),
        predicted_labels=mean_probs.argmax(axis=1),
    )
    return uncertainty_maps(out)


def prediction_from_logits(logits: np.ndarray) -> PredictionOutput:
    """PredictionOutput from precomputed per-sample logits (T, n, C)."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.ndim != 3:
        raise ValueError(f"expected (T, n, C) logits, got {logits.shape}")
    probs_t = _softmax_np(logits)
    probs = probs_t.mean(axis=0)
    out = PredictionOutput(probs=probs, per_sample_logits=logits, predicted_labels=probs.argmax(axis=1))
    return uncertainty_maps(out)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi <= lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def uncertainty_maps(out: PredictionOutput) -> PredictionOutput:
    """Fill variance, entropy and fused uncertainty maps in place.

    variance: per point, mean over classes of the across-sample variance of
    the softmax probabilities. entropy: of the mean distribution. fused:
    equal-weight sum of the min-max normalized maps (entropy first scaled by
    its ln(C) bound); an all-constant map normalizes to zeros.
    """
    if out.per_sample_logits is None:
        raise ValueError("per-sample logits required for uncertainty maps")
    probs_t = _softmax_np(out.per_sample_logits)
    out.variance_map = probs_t.var(axis=0).mean(axis=1)
    p = out.probs
    out.entropy_map = -(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)).sum(axis=1)
    scaled_entropy = out.entropy_map / np.log(out.n_classes)
    out.fused_uncertainty = 0.5 * _minmax(out.variance_map) + 0.5 * _minmax(scaled_entropy)
    return out


# ---------------------------------------------------------------------------
# CSV export


def save_predictions(path, out: PredictionOutput, true_labels):
    """Per-point CSV: point_index,pred_label,true_label,prob_0..prob_N,variance,entropy,fused_uncertainty."""
    true_labels = np.asarray(true_labels, dtype=np.int64)
    if true_labels.shape != (out.n,):
        raise ValueError("true_labels length must match prediction size")
    prob_cols = ",".join(f"prob_{c}" for c in range(out.n_classes))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"point_index,pred_label,true_label,{prob_cols},variance,entropy,fused_uncertainty\n")
        for j in range(out.n):
            probs = ",".join(f"{v:.17g}" for v in out.probs[j])
            fh.write(
                f"{j},{int(out.predicted_labels[j])},{int(true_labels[j])},{probs},"
                f"{out.variance_map[j]:.17g},{out.entropy_map[j]:.17g},{out.fused_uncertainty[j]:.17g}\n"
            )


def save_uncertainty_heatmap(path, coords, out: PredictionOutput, true_labels):
    """Plot-ready CSV: x,y,z,pred_label,true_label,fused_uncertainty."""
    coords = np.asarray(coords, dtype=np.float64)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("x,y,z,pred_label,true_label,fused_uncertainty\n")
        for j in range(out.n):
            x, y, z = coords[j, :3]
            fh.write(
                f"{x:.17g},{y:.17g},{z:.17g},{int(out.predicted_labels[j])},"
                f"{int(true_labels[j])},{out.fused_uncertainty[j]:.17g}\n"
            )
