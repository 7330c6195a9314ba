"""Dual-stream prototype refinement.

One channel-affinity attention matrix, computed from the query and support
token sets, drives two symmetric refinement passes: each stream's
prototypes are value-projected, mixed across channels by the shared
attention, convolved along the prototype axis and layer-normalized onto a
residual path. An adaptive sigmoid gate then blends raw and refined
prototypes per class.
"""

from dataclasses import dataclass

import numpy as np

from upl import autodiff as ad
from upl.autodiff import Tensor
from upl.encoder import TokenSet
from upl.nn import Conv1dProto, LayerNorm, Linear, xavier_uniform
from upl.prototypes import PrototypeSet


@dataclass
class ChannelAttention:
    """Row-stochastic d x d channel affinity plus the projections that built it."""

    weights: Tensor  # (d, d), rows sum to 1
    query_proj: Tensor
    key_proj: Tensor


class FusionGate:
    """Sigmoid gate over the concatenation of two prototype sets.

    Vector granularity emits one gate value per feature coordinate; scalar
    granularity emits one per class and broadcasts.
    """

    def __init__(self, d: int, rng: np.random.Generator, granularity: str = "vector"):
        if granularity not in ("vector", "scalar"):
            raise ValueError(f"gate granularity must be vector or scalar, got {granularity!r}")
        self.granularity = granularity
        self.gate_proj = Linear(2 * d, d if granularity == "vector" else 1, rng)
        self.last_alpha = None

    def __call__(self, a: Tensor, b: Tensor) -> Tensor:
        alpha = ad.sigmoid(self.gate_proj(ad.concat([a, b], axis=1)))
        self.last_alpha = alpha.data.copy()
        return alpha

    def parameters(self):
        return {f"gate.{k}": v for k, v in self.gate_proj.parameters().items()}


def gated_fuse(a: Tensor, b: Tensor, gate: FusionGate) -> Tensor:
    """(1 - alpha) * a + alpha * b with alpha = gate([a || b])."""
    alpha = gate(a, b)
    return (1.0 - alpha) * a + alpha * b


class DualStreamRefiner:
    def __init__(self, d: int, rng: np.random.Generator, conv_width: int = 1, gate_granularity: str = "vector"):
        self.d = d
        self.query_proj = Tensor(xavier_uniform(rng, d, d, (d, d)), requires_grad=True)
        self.key_proj = Tensor(xavier_uniform(rng, d, d, (d, d)), requires_grad=True)
        self.value_proj = Linear(d, d, rng)
        self.conv = Conv1dProto(d, conv_width, rng)
        self.norm = LayerNorm(d)
        self.alpha_gate = FusionGate(d, rng, gate_granularity)

    def parameters(self):
        out = {"query_proj": self.query_proj, "key_proj": self.key_proj}
        for prefix, mod in (("value", self.value_proj), ("conv", self.conv), ("norm", self.norm)):
            for key, tensor in mod.parameters().items():
                out[f"{prefix}.{key}"] = tensor
        out.update(self.alpha_gate.parameters())
        return out

    def channel_attention(self, tq: TokenSet, ts: TokenSet) -> ChannelAttention:
        """Shared attention: softmax over the key axis of the projected token
        dot products, scaled by sqrt(n_tok) (the contraction length)."""
        if tq.d != ts.d or tq.n_tok != ts.n_tok:
            raise ValueError(f"token sets disagree: ({tq.d},{tq.n_tok}) vs ({ts.d},{ts.n_tok})")
        if tq.d != self.d:
            raise ValueError(f"expected token dim {self.d}, got {tq.d}")
        q = ad.matmul(self.query_proj, tq.tokens)  # (d, n_tok)
        k = ad.matmul(self.key_proj, ts.tokens)
        scores = ad.matmul(q, ad.transpose(k)) / float(np.sqrt(tq.n_tok))
        return ChannelAttention(ad.softmax(scores, axis=-1), self.query_proj, self.key_proj)

    def _refine_stream(self, attention: ChannelAttention, p: PrototypeSet) -> PrototypeSet:
        mask = p.valid_column()
        v = self.value_proj(p.prototypes) * mask
        mixed = ad.matmul(v, ad.transpose(attention.weights))
        out = self.norm(p.prototypes + self.conv(mixed)) * mask
        return PrototypeSet(out, "refined", p.class_ids, p.valid_mask.copy())

    def refine(self, ts: TokenSet, tq: TokenSet, ps_raw: PrototypeSet, pq_raw: PrototypeSet):
        """Refine both streams with one shared attention; returns (support, query)."""
        if ps_raw.stage != "raw" or pq_raw.stage != "raw":
            raise ValueError(f"refinement expects raw prototypes, got {ps_raw.stage!r}/{pq_raw.stage!r}")
        attention = self.channel_attention(tq, ts)
        return self._refine_stream(attention, ps_raw), self._refine_stream(attention, pq_raw)

    def fuse_alpha(self, raw: PrototypeSet, refined: PrototypeSet) -> PrototypeSet:
        if raw.stage != "raw" or refined.stage != "refined":
            raise ValueError(f"fuse_alpha expects raw+refined, got {raw.stage!r}/{refined.stage!r}")
        if raw.class_ids != refined.class_ids:
            raise ValueError("class lists differ")
        fused = gated_fuse(raw.prototypes, refined.prototypes, self.alpha_gate) * raw.valid_column()
        return PrototypeSet(fused, "fused1", raw.class_ids, raw.valid_mask & refined.valid_mask)


def pseudo_class_masks(query_features: np.ndarray, support_raw: PrototypeSet, confidence: float = 0.5):
    """Inference-time stand-in for ground-truth query masks.

    Each query point is assigned to its nearest support prototype by cosine
    similarity; points whose softmax-over-classes confidence falls below the
    threshold are excluded from every mask.
    """
    feats = np.asarray(query_features, dtype=np.float64)
    protos = support_raw.prototypes.data
    fn = np.sqrt(np.einsum("ij,ij->i", feats, feats))
    pn = np.sqrt(np.einsum("ij,ij->i", protos, protos))
    denom = np.outer(np.where(fn > 0, fn, 1.0), np.where(pn > 0, pn, 1.0))
    cos = np.where(np.outer(fn > 0, pn > 0), (feats @ protos.T) / denom, 0.0)
    cos = np.where(support_raw.valid_mask[None, :], cos, -np.inf)
    shifted = cos - cos.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    probs = e / e.sum(axis=1, keepdims=True)
    assign = probs.argmax(axis=1)
    keep = probs.max(axis=1) >= confidence
    return [(assign == c) & keep for c in range(support_raw.n_classes)]
