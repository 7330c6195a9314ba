"""Gaussian prototype heads, reparameterized sampling and KL regularization.

Class prototypes become diagonal Gaussians: a prior head reads the fused
support prototypes, a posterior head reads raw query prototypes (training
only). Samples are drawn by the location-scale transform so gradients reach
the mean and scale but never the noise, and a sigmoid gate folds each
sample back into the deterministic prototype.
"""

from dataclasses import dataclass

import numpy as np

from upl import autodiff as ad
from upl.autodiff import Tensor
from upl.nn import Linear
from upl.prototypes import PrototypeSet
from upl.refinement import FusionGate, gated_fuse

SIGMA_CLAMP = (-5.0, 2.0)


@dataclass
class GaussianPrototype:
    mu: Tensor  # (C, d)
    sigma: Tensor  # (C, d), strictly positive
    source: str  # prior | posterior
    valid_mask: np.ndarray

    def __post_init__(self):
        if self.source not in ("prior", "posterior"):
            raise ValueError(f"source must be prior or posterior, got {self.source!r}")
        if self.mu.shape != self.sigma.shape:
            raise ValueError("mu and sigma must share a shape")
        if (self.sigma.data <= 0).any():
            raise ValueError("sigma must be strictly positive")
        self.valid_mask = np.asarray(self.valid_mask, dtype=bool)

    @property
    def shape(self):
        return self.mu.shape


@dataclass
class LatentSample:
    z: Tensor  # (C, d)
    epsilon: np.ndarray
    sample_index: int = 0


class GaussianHead:
    """Two-layer map d -> d -> 2d splitting into (mu, log sigma)."""

    def __init__(self, d: int, rng: np.random.Generator, source: str, sigma_clamp=SIGMA_CLAMP):
        if source not in ("prior", "posterior"):
            raise ValueError(f"source must be prior or posterior, got {source!r}")
        self.d, self.source = d, source
        self.lo, self.hi = float(sigma_clamp[0]), float(sigma_clamp[1])
        if self.lo >= self.hi:
            raise ValueError("sigma clamp bounds must satisfy lo < hi")
        self.l1 = Linear(d, d, rng)
        self.l2 = Linear(d, 2 * d, rng)

    def __call__(self, p: PrototypeSet) -> GaussianPrototype:
        expected = "fused1" if self.source == "prior" else "raw"
        if p.stage != expected:
            raise ValueError(f"{self.source} head expects stage {expected!r}, got {p.stage!r}")
        h = ad.tanh(self.l1(p.prototypes))
        out = self.l2(h)
        mu = ad.narrow(out, 1, 0, self.d)
        log_sigma = ad.narrow(out, 1, self.d, self.d)
        sigma = ad.exp(ad.clip(log_sigma, self.lo, self.hi))
        return GaussianPrototype(mu, sigma, self.source, p.valid_mask.copy())

    def parameters(self):
        out = {}
        for name, layer in (("l1", self.l1), ("l2", self.l2)):
            for key, tensor in layer.parameters().items():
                out[f"{name}.{key}"] = tensor
        return out


def reparameterize(g: GaussianPrototype, rng=None, epsilon=None, sample_index: int = 0) -> LatentSample:
    """z = mu + sigma * eps with eps ~ N(0, I) (or caller-supplied for determinism)."""
    if epsilon is None:
        if rng is None:
            raise ValueError("need an rng or an explicit epsilon")
        epsilon = rng.standard_normal(g.shape)
    else:
        epsilon = np.asarray(epsilon, dtype=np.float64)
        if epsilon.shape != g.shape:
            raise ValueError(f"epsilon shape {epsilon.shape} does not match {g.shape}")
    z = g.mu + g.sigma * Tensor(epsilon)
    return LatentSample(z=z, epsilon=epsilon, sample_index=sample_index)


def kl_divergence(q: GaussianPrototype, p: GaussianPrototype) -> Tensor:
    """Closed-form diagonal-Gaussian KL(q || p) summed over valid classes.

    Per coordinate: log(sigma_p / sigma_q)
                    + (sigma_q^2 + (mu_q - mu_p)^2) / (2 sigma_p^2) - 1/2.
    Classes flagged invalid on either side contribute nothing.
    """
    if q.source != "posterior" or p.source != "prior":
        raise ValueError(f"expected KL(posterior || prior), got KL({q.source} || {p.source})")
    if q.shape != p.shape:
        raise ValueError(f"shape mismatch: {q.shape} vs {p.shape}")
    mask = Tensor((q.valid_mask & p.valid_mask).astype(np.float64)[:, None])
    dmu = q.mu - p.mu
    term = ad.log(p.sigma / q.sigma) + (q.sigma * q.sigma + dmu * dmu) / (2.0 * p.sigma * p.sigma) - 0.5
    return ad.tsum(term * mask)


class VariationalHeads:
    """Prior + posterior heads and the latent fusion gate."""

    def __init__(self, d: int, rng: np.random.Generator, sigma_clamp=SIGMA_CLAMP, gate_granularity: str = "vector"):
        self.prior_head = GaussianHead(d, rng, "prior", sigma_clamp)
        self.posterior_head = GaussianHead(d, rng, "posterior", sigma_clamp)
        self.beta_gate = FusionGate(d, rng, gate_granularity)

    def parameters(self):
        out = {}
        for key, tensor in self.prior_head.parameters().items():
            out[f"prior.{key}"] = tensor
        for key, tensor in self.posterior_head.parameters().items():
            out[f"posterior.{key}"] = tensor
        for key, tensor in self.beta_gate.parameters().items():
            out[f"beta_{key}"] = tensor
        return out

    def fuse_beta(self, p1: PrototypeSet, z: LatentSample) -> PrototypeSet:
        return fuse_beta(p1, z, self.beta_gate)


def fuse_beta(p1: PrototypeSet, z: LatentSample, gate: FusionGate) -> PrototypeSet:
    """Gated blend of the deterministic prototype with a latent sample."""
    if p1.stage != "fused1":
        raise ValueError(f"fuse_beta expects stage fused1, got {p1.stage!r}")
    if z.z.shape != p1.prototypes.shape:
        raise ValueError(f"latent shape {z.z.shape} does not match {p1.prototypes.shape}")
    fused = gated_fuse(p1.prototypes, z.z, gate) * p1.valid_column()
    return PrototypeSet(fused, "fused2", p1.class_ids, p1.valid_mask.copy())
