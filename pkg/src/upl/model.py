"""End-to-end few-shot segmentation model.

Wires the encoder, prototype construction, dual-stream refinement and the
variational heads into one parameter store, and exposes the training
forward pass (ground-truth query masks) and the inference forward pass
(pseudo-masked query prototypes, Monte Carlo ensemble).
"""

from dataclasses import dataclass

import numpy as np

from upl import autodiff as ad
from upl.autodiff import Tensor
from upl.data import Episode
from upl.encoder import PointEncoder, build_merged_tokens, build_tokens
from upl.nn import Linear, ParamStore
from upl.predictor import PredictionOutput, mc_predict, prediction_from_logits, similarity_logits
from upl.prototypes import PrototypeSet, build_raw_prototypes, class_masks_from_labels, merge_support_prototypes
from upl.refinement import DualStreamRefiner, pseudo_class_masks
from upl.variational import VariationalHeads, kl_divergence, reparameterize


@dataclass
class ModelConfig:
    n_way: int = 1
    d_in: int = 3
    d_f: int = 64
    hidden: int = 64
    n_tok: int = 128
    k_neighbors: int = 8
    m_sub: int = 1
    temperature: float = 0.1
    dpr_enabled: bool = True
    conv_width: int = 1
    gate_granularity: str = "vector"
    vpir_enabled: bool = True
    sigma_clamp: tuple = (-5.0, 2.0)
    train_samples: int = 1
    pseudo_confidence: float = 0.5
    base_classes: tuple = ()

    @property
    def n_classes(self) -> int:
        return self.n_way + 1


def as_stage(ps: PrototypeSet, stage: str) -> PrototypeSet:
    """Relabel a prototype set's stage (used when a pipeline stage is disabled)."""
    return PrototypeSet(ps.prototypes, stage, ps.class_ids, ps.valid_mask.copy())


class FewShotModel:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = PointEncoder(cfg.d_in, cfg.d_f, rng, hidden=cfg.hidden, k_neighbors=cfg.k_neighbors)
        self.refiner = DualStreamRefiner(cfg.d_f, rng, conv_width=cfg.conv_width, gate_granularity=cfg.gate_granularity)
        self.heads = VariationalHeads(cfg.d_f, rng, sigma_clamp=cfg.sigma_clamp, gate_granularity=cfg.gate_granularity)
        self.base_head = Linear(cfg.d_f, len(cfg.base_classes), rng) if cfg.base_classes else None
        self.store = ParamStore()
        for key, tensor in self.encoder.parameters().items():
            self.store.add(f"encoder.{key}", tensor)
        for key, tensor in self.refiner.parameters().items():
            self.store.add(f"dpr.{key}", tensor)
        for key, tensor in self.heads.parameters().items():
            self.store.add(f"vpir.{key}", tensor)
        if self.base_head is not None:
            for key, tensor in self.base_head.parameters().items():
                self.store.add(f"base_head.{key}", tensor)

    # -- shared pipeline pieces ------------------------------------------

    def encode_episode(self, episode: Episode):
        support_fmaps = [self.encoder(cloud) for cloud, _ in episode.support]
        query_fmap = self.encoder(episode.query)
        return support_fmaps, query_fmap

    def support_raw_prototypes(self, episode: Episode, support_fmaps) -> PrototypeSet:
        """Merged raw support prototypes over all N*K shots.

        Each shot contributes its own class (mask) and background
        (complement); the other classes are invalid for that shot.
        """
        per_shot = []
        n_classes = self.cfg.n_classes
        for i, (cloud, mask) in enumerate(episode.support):
            local = episode.support_class(i)
            masks = [np.zeros(cloud.n, dtype=bool) for _ in range(n_classes)]
            masks[0] = ~mask
            masks[local] = mask
            per_shot.append(build_raw_prototypes(support_fmaps[i], cloud.coords, masks, self.cfg.m_sub))
        return merge_support_prototypes(per_shot)

    def query_raw_prototypes(self, episode: Episode, query_fmap, support_raw=None, use_labels=True) -> PrototypeSet:
        if use_labels:
            masks = class_masks_from_labels(episode.query.labels, self.cfg.n_classes)
        else:
            masks = pseudo_class_masks(query_fmap.features.data, support_raw, self.cfg.pseudo_confidence)
            if not any(m.any() for m in masks):
                # degenerate threshold: keep the plain nearest-prototype assignment
                masks = pseudo_class_masks(query_fmap.features.data, support_raw, 0.0)
        return build_raw_prototypes(query_fmap, episode.query.coords, masks, self.cfg.m_sub)

    def fused_support(self, episode: Episode, support_fmaps, query_fmap, support_raw: PrototypeSet, query_raw: PrototypeSet) -> PrototypeSet:
        """Support prototypes at stage fused1 (refined and gated when enabled)."""
        if not self.cfg.dpr_enabled:
            return as_stage(support_raw, "fused1")
        ts = build_merged_tokens(support_fmaps, [cloud.coords for cloud, _ in episode.support], self.cfg.n_tok)
        tq = build_tokens(query_fmap, episode.query.coords, self.cfg.n_tok)
        s_ref, _q_ref = self.refiner.refine(ts, tq, support_raw, query_raw)
        return self.refiner.fuse_alpha(support_raw, s_ref)

    # -- training forward --------------------------------------------------

    def forward_train(self, episode: Episode, sample_rng: np.random.Generator, fixed_epsilon=None):
        """Training pass with ground-truth query masks.

        Returns (probs, kl, aux) where probs averages cfg.train_samples
        softmax outputs (one prior sample each) and kl is the summed
        posterior-to-prior divergence (zero tensor when disabled).
        fixed_epsilon freezes the reparameterization noise (gradient checks).
        """
        support_fmaps, query_fmap = self.encode_episode(episode)
        support_raw = self.support_raw_prototypes(episode, support_fmaps)
        query_raw = self.query_raw_prototypes(episode, query_fmap, use_labels=True)
        p1 = self.fused_support(episode, support_fmaps, query_fmap, support_raw, query_raw)

        if self.cfg.vpir_enabled:
            prior = self.heads.prior_head(p1)
            posterior = self.heads.posterior_head(query_raw)
            kl = kl_divergence(posterior, prior)
            probs = None
            for t in range(self.cfg.train_samples):
                z = reparameterize(prior, rng=sample_rng, epsilon=fixed_epsilon, sample_index=t)
                p2 = self.heads.fuse_beta(p1, z)
                logits = similarity_logits(query_fmap, p2, self.cfg.temperature)
                p = ad.softmax(logits, axis=-1)
                probs = p if probs is None else probs + p
            if self.cfg.train_samples > 1:
                probs = probs / float(self.cfg.train_samples)
        else:
            kl = Tensor(0.0)
            p2 = as_stage(p1, "fused2")
            logits = similarity_logits(query_fmap, p2, self.cfg.temperature)
            probs = ad.softmax(logits, axis=-1)

        aux = {"support_fmaps": support_fmaps, "query_fmap": query_fmap, "p1": p1}
        return probs, kl, aux

    # -- inference forward --------------------------------------------------

    def forward_eval(self, episode: Episode, T: int, rng: np.random.Generator) -> PredictionOutput:
        """Inference pass: pseudo-masked query prototypes, T-sample ensemble."""
        with ad.no_grad():
            support_fmaps, query_fmap = self.encode_episode(episode)
            support_raw = self.support_raw_prototypes(episode, support_fmaps)
            query_raw = self.query_raw_prototypes(episode, query_fmap, support_raw=support_raw, use_labels=False)
            p1 = self.fused_support(episode, support_fmaps, query_fmap, support_raw, query_raw)
            if self.cfg.vpir_enabled:
                prior = self.heads.prior_head(p1)
                return mc_predict(query_fmap, prior, p1, self.heads.beta_gate, T, rng, self.cfg.temperature)
            logits = similarity_logits(query_fmap, as_stage(p1, "fused2"), self.cfg.temperature)
            return prediction_from_logits(logits.data[None, :, :])

    # -- base-class supervision ---------------------------------------------

    def base_logits(self, features: Tensor) -> Tensor:
        if self.base_head is None:
            raise ValueError("model has no base-class head")
        return self.base_head(features)
