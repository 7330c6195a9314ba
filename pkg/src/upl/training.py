"""Composite loss with KL warm-up, the episodic training loop and evaluation.

The total loss is segmentation cross-entropy on the query plus auxiliary
base-class cross-entropy plus the KL term weighted by a linear warm-up
schedule. Episodes inside an epoch run sequentially for reproducibility;
evaluation may fan episodes out over threads capped by UPL_THREADS (results
are always reduced in episode order).
"""

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from upl import autodiff as ad
from upl import metrics as metrics_mod
from upl.autodiff import Tensor
from upl.data import Episode, EpisodeSpec, sample_episode
from upl.errors import NumericError
from upl.model import FewShotModel
from upl.nn import Optimizer, optimizer_step
from upl.rng import substream


@dataclass
class TrainConfig:
    epochs: int = 10
    episodes_per_epoch: int = 20
    beta_max: float = 0.1
    warmup_epochs: int = None  # default: 20% of epochs
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    n_way: int = 1
    k_shot: int = 1
    novel_pool: tuple = ()
    seed: int = 0

    def __post_init__(self):
        if self.warmup_epochs is None:
            self.warmup_epochs = self.epochs // 5
        if self.episodes_per_epoch < 1:
            raise ValueError("episodes_per_epoch must be >= 1")
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs must not exceed epochs")
        if self.beta_max < 0:
            raise ValueError("beta_max must be nonnegative")


@dataclass
class LossBreakdown:
    seg: float
    base: float
    kl: float
    beta_e: float
    total: float = field(init=False)

    def __post_init__(self):
        self.total = self.seg + self.base + self.beta_e * self.kl


def beta_schedule(e: int, cfg: TrainConfig) -> float:
    """Linear warm-up: beta_max * min(1, e / warmup_epochs)."""
    if e < 0:
        raise ValueError("epoch index must be >= 0")
    if cfg.warmup_epochs == 0:
        return cfg.beta_max
    return cfg.beta_max * min(1.0, e / cfg.warmup_epochs)


def seg_loss(probs, labels) -> Tensor:
    """Mean per-point cross-entropy -log p[j, y_j] from class probabilities."""
    if not isinstance(probs, Tensor):
        probs = Tensor(np.asarray(probs.probs if hasattr(probs, "probs") else probs))
    labels = np.asarray(labels, dtype=np.int64)
    n, c = probs.shape
    if labels.shape != (n,):
        raise ValueError("labels must be one per point")
    if labels.min() < 0 or labels.max() >= c:
        raise ValueError(f"label out of range [0, {c - 1}]")
    onehot = Tensor(np.eye(c)[labels])
    picked = ad.tsum(probs * onehot, axis=1)
    return -ad.tmean(ad.log(picked))


def base_loss(feature_maps, original_labels, model: FewShotModel) -> Tensor:
    """Cross-entropy of the base-class head over all base-labeled points.

    feature_maps/original_labels run over the episode's support and query
    scenes. Returns a zero tensor when the model has no base head or no
    base-labeled point is present.
    """
    if model.base_head is None or not model.cfg.base_classes:
        return Tensor(0.0)
    base_ids = {int(c): i for i, c in enumerate(model.cfg.base_classes)}
    rows, targets = [], []
    for fmap, labels in zip(feature_maps, original_labels):
        labels = np.asarray(labels)
        sel = np.flatnonzero(np.isin(labels, list(base_ids)))
        if sel.size:
            rows.append(ad.take_rows(fmap.features, sel))
            targets.append(np.array([base_ids[int(v)] for v in labels[sel]], dtype=np.int64))
    if not rows:
        return Tensor(0.0)
    feats = ad.concat(rows, axis=0) if len(rows) > 1 else rows[0]
    target = np.concatenate(targets)
    logits = model.base_logits(feats)
    onehot = Tensor(np.eye(len(base_ids))[target])
    return -ad.tmean(ad.tsum(ad.log_softmax(logits, axis=-1) * onehot, axis=1))


def episode_losses(model: FewShotModel, episode: Episode, sample_rng) -> tuple:
    """(seg, base, kl) tensors for one training episode."""
    probs, kl, aux = model.forward_train(episode, sample_rng)
    seg = seg_loss(probs, episode.query.labels)
    fmaps = aux["support_fmaps"] + [aux["query_fmap"]]
    labels = [cloud.labels for cloud, _ in episode.support] + [episode.query_original_labels]
    base = base_loss(fmaps, labels, model)
    return seg, base, kl


def train_episode(model: FewShotModel, episode: Episode, cfg: TrainConfig, opt: Optimizer, e: int, sample_rng) -> LossBreakdown:
    """One optimization step on one episode; returns the loss breakdown."""
    seg, base, kl = episode_losses(model, episode, sample_rng)
    beta = beta_schedule(e, cfg)
    # beta == 0 drops the KL term from the graph entirely so a zero-weight
    # run is bit-identical to one with no KL term at all
    loss = seg + base if beta == 0.0 else seg + base + kl * beta
    model.store.zero_grad()
    loss.backward()
    model.store.fill_missing_grads()
    optimizer_step(model.store, opt)
    return LossBreakdown(seg=float(seg.data), base=float(base.data), kl=float(kl.data), beta_e=beta)


def episode_stream(scenes, n_way, k_shot, novel_pool, seed: int, count: int, name: str = "episodes"):
    """Deterministic sequence of episodes, novel classes rotated over the pool."""
    pool = [int(c) for c in novel_pool]
    if len(pool) < n_way:
        raise ValueError(f"novel pool holds {len(pool)} classes, need {n_way}")
    rng = substream(seed, name)
    episodes = []
    for i in range(count):
        novel = [pool[(i + j) % len(pool)] for j in range(n_way)]
        spec = EpisodeSpec(n_way, k_shot, novel, seed=int(rng.integers(2**62)))
        episodes.append(sample_episode(scenes, spec))
    return episodes


def train(model: FewShotModel, scenes, cfg: TrainConfig, log_rows=None):
    """Episodic training over epochs; appends CSV-ready rows to log_rows."""
    opt = Optimizer(cfg.optimizer, cfg.learning_rate)
    sample_rng = substream(cfg.seed, "sampling")
    for e in range(cfg.epochs):
        episodes = episode_stream(
            scenes, cfg.n_way, cfg.k_shot, cfg.novel_pool, cfg.seed, cfg.episodes_per_epoch, name=f"episodes/{e}"
        )
        for step, episode in enumerate(episodes):
            try:
                breakdown = train_episode(model, episode, cfg, opt, e, sample_rng)
            except NumericError as exc:
                raise NumericError(f"numeric failure at epoch {e} step {step}: {exc}") from exc
            if log_rows is not None:
                log_rows.append(
                    {
                        "epoch": e,
                        "step": step,
                        "seg": breakdown.seg,
                        "base": breakdown.base,
                        "kl": breakdown.kl,
                        "beta": breakdown.beta_e,
                        "total": breakdown.total,
                    }
                )
    return model


def write_train_log(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,step,seg,base,kl,beta,total\n")
        for r in rows:
            fh.write(
                f"{r['epoch']},{r['step']},{r['seg']:.17g},{r['base']:.17g},"
                f"{r['kl']:.17g},{r['beta']:.17g},{r['total']:.17g}\n"
            )


def max_threads() -> int:
    """Internal parallelism cap from UPL_THREADS (default 1)."""
    try:
        return max(1, int(os.environ.get("UPL_THREADS", "1")))
    except ValueError:
        return 1


def evaluate(model: FewShotModel, episodes, T: int, seed: int = 0, n_bins: int = 15):
    """Run the inference path over episodes and aggregate mIoU and ECE.

    Pure: parameters are read-only. Per-episode Monte Carlo streams are
    derived from (seed, episode index), so thread-level parallelism cannot
    change the result; outputs reduce in episode order.
    """
    if T < 1:
        raise ValueError("T must be >= 1")

    def run_one(args):
        i, episode = args
        rng = substream(seed, f"mc/{i}")
        return model.forward_eval(episode, T, rng)

    workers = max_threads()
    with ad.no_grad():
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                outputs = list(pool.map(run_one, enumerate(episodes)))
        else:
            outputs = [run_one(x) for x in enumerate(episodes)]

    mious, eces, bin_lists = [], [], []
    per_class_acc: dict = {}
    for episode, out in zip(episodes, outputs):
        m, per_class = metrics_mod.miou(out.predicted_labels, episode.query.labels, model.cfg.n_way)
        mious.append(m)
        for c, v in per_class.items():
            per_class_acc.setdefault(c, []).append(v)
        e, bins = metrics_mod.ece(out.probs, out.predicted_labels, episode.query.labels, n_bins)
        eces.append(e)
        bin_lists.append(bins)
    report = metrics_mod.MetricsReport(
        miou=float(np.mean(mious)) if mious else 0.0,
        per_class_iou={c: float(np.mean(v)) for c, v in sorted(per_class_acc.items())},
        ece=float(np.mean(eces)) if eces else 0.0,
        bins=metrics_mod.merge_bins(bin_lists) if bin_lists else [],
        episodes=len(episodes),
    )
    return report, outputs
