"""Point-cloud data model, synthetic scenes, CSV I/O and episode sampling.

Scene files are CSV with one point per row, columns ``x,y,z[,r,g,b],label``
and optional ``#``-prefixed header lines. Episode manifests are JSON listing
support scene paths per class plus one query path.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from upl.errors import DataError
from upl.rng import substream


@dataclass
class PointCloud:
    """Raw points with integer labels; label -1 marks unlabeled points."""

    points: np.ndarray
    labels: np.ndarray
    scene_id: str = ""

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.ndim != 2 or self.points.shape[0] < 1:
            raise ValueError(f"points must be (n >= 1, d_pt), got {self.points.shape}")
        if self.points.shape[1] < 3:
            raise ValueError(f"points need at least 3 coordinates, got {self.points.shape[1]}")
        if self.labels.shape != (self.points.shape[0],):
            raise ValueError("labels must be one integer per point")
        if (self.labels < -1).any():
            raise ValueError("labels must be -1 or a nonnegative class id")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def coords(self) -> np.ndarray:
        return self.points[:, :3]

    def class_set(self) -> set:
        return set(int(c) for c in np.unique(self.labels) if c >= 0)


@dataclass
class EpisodeSpec:
    n_way: int
    k_shot: int
    novel_classes: list
    seed: int = 0

    def __post_init__(self):
        if self.n_way < 1 or self.k_shot < 1:
            raise ValueError("n_way and k_shot must be >= 1")
        self.novel_classes = [int(c) for c in self.novel_classes]
        if len(self.novel_classes) != self.n_way:
            raise ValueError(f"expected {self.n_way} novel classes, got {len(self.novel_classes)}")
        if len(set(self.novel_classes)) != self.n_way:
            raise ValueError("novel classes must be distinct")
        if self.seed < 0:
            raise ValueError("seed must be unsigned")


@dataclass
class Episode:
    """One N-way K-shot task: N*K masked support scenes and one query scene.

    The query cloud carries remapped labels (background 0, i-th novel class
    i); original query labels are kept separately for base-class supervision.
    Support clouds keep their original labels, with a binary foreground mask
    per shot.
    """

    support: list  # of (PointCloud, np.ndarray bool mask)
    query: PointCloud
    spec: EpisodeSpec
    query_original_labels: np.ndarray = None

    def __post_init__(self):
        if len(self.support) != self.spec.n_way * self.spec.k_shot:
            raise ValueError(f"support must hold N*K={self.spec.n_way * self.spec.k_shot} shots")
        for cloud, mask in self.support:
            mask = np.asarray(mask, dtype=bool)
            if mask.shape != (cloud.n,) or not mask.any():
                raise ValueError("each support mask must flag at least one foreground point")
        bad = set(np.unique(self.query.labels)) - set(range(self.spec.n_way + 1))
        if bad:
            raise ValueError(f"query labels outside [0, N]: {sorted(bad)}")

    def support_class(self, shot_index: int) -> int:
        """Episode-local class id (1..N) of the given support shot."""
        return shot_index // self.spec.k_shot + 1


@dataclass
class SyntheticSceneConfig:
    points_per_object: int = 64
    objects_per_scene: int = 1
    intra_class_jitter: float = 0.3
    inter_class_gap: float = 5.0
    seed: int = 0
    with_color: bool = True
    color_noise: float = 0.05

    def __post_init__(self):
        if self.points_per_object < 1 or self.objects_per_scene < 1:
            raise ValueError("counts must be >= 1")
        if self.intra_class_jitter < 0 or self.inter_class_gap < 0:
            raise ValueError("jitter and gap must be nonnegative")
        if self.color_noise < 0:
            raise ValueError("color_noise must be nonnegative")


def class_color(class_id: int) -> np.ndarray:
    """Deterministic RGB signature for a class id.

    Hues follow the golden-ratio wheel so any small set of ids gets
    well-separated colors; saturation/value wobble breaks residual ties.
    """
    import colorsys

    c = int(class_id)
    hue = (c * 0.6180339887498949) % 1.0
    sat = 0.65 + 0.3 * ((c * 0.7548776662466927) % 1.0)
    val = 0.6 + 0.35 * ((c * 0.5698402909980532) % 1.0)
    return np.asarray(colorsys.hsv_to_rgb(hue, sat, val))


def class_shape_matrix(class_id: int) -> np.ndarray:
    """Deterministic 3x3 shape for a class's Gaussian blobs.

    Classes are only told apart across scenes by their cluster geometry, so
    each class id hashes to a fixed anisotropic scaling (elongation axis,
    eccentricity and overall radius). Blob points are center + jitter *
    (eps @ shape.T) with eps ~ N(0, I).
    """
    rng = substream(int(class_id), "class-shape")
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    stretch = 2.0 + 4.0 * rng.random()
    radius = 0.6 + 0.9 * rng.random()
    return radius * (np.eye(3) + (stretch - 1.0) * np.outer(axis, axis))


def _place_centers(rng: np.random.Generator, count: int, gap: float) -> np.ndarray:
    """Sample blob centers with pairwise distance >= gap (deterministic)."""
    span = max(gap, 1.0) * (np.ceil(count ** (1.0 / 3.0)) + 1.0)
    centers = []
    attempts = 0
    while len(centers) < count:
        cand = rng.uniform(0.0, span, size=3)
        if all(np.linalg.norm(cand - c) >= gap for c in centers):
            centers.append(cand)
        attempts += 1
        if attempts > 200 * count:
            span *= 1.5
            attempts = 0
    return np.asarray(centers)


def generate_synthetic_scene(cfg: SyntheticSceneConfig, class_ids, return_centers=False):
    """One Gaussian blob per (class, object); centers separated by >= gap.

    A class is recognizable across scenes by two deterministic signatures
    derived from its id: the blob covariance (class_shape_matrix) and, when
    with_color is set, a noisy RGB color (class_color).
    """
    class_ids = [int(c) for c in class_ids]
    if not class_ids:
        raise ValueError("class_ids must be nonempty")
    if any(c < 0 for c in class_ids):
        raise ValueError("class ids must be nonnegative")
    rng = substream(cfg.seed, "scene")
    n_blobs = len(class_ids) * cfg.objects_per_scene
    centers = _place_centers(rng, n_blobs, cfg.inter_class_gap)
    points, labels = [], []
    blob = 0
    for cid in class_ids:
        shape = class_shape_matrix(cid)
        color = class_color(cid)
        for _ in range(cfg.objects_per_scene):
            offsets = rng.normal(0.0, 1.0, size=(cfg.points_per_object, 3))
            xyz = centers[blob] + cfg.intra_class_jitter * (offsets @ shape.T)
            if cfg.with_color:
                rgb = color + cfg.color_noise * rng.normal(size=(cfg.points_per_object, 3))
                xyz = np.hstack([xyz, np.clip(rgb, 0.0, 1.0)])
            points.append(xyz)
            labels.append(np.full(cfg.points_per_object, cid, dtype=np.int64))
            blob += 1
    cloud = PointCloud(
        np.concatenate(points), np.concatenate(labels), scene_id=f"synth-{cfg.seed}"
    )
    return (cloud, centers) if return_centers else cloud


def remap_query_labels(labels: np.ndarray, novel_classes) -> np.ndarray:
    """Background -> 0, i-th novel class -> i (a bijection onto [0, N])."""
    out = np.zeros_like(labels)
    for i, cid in enumerate(novel_classes, start=1):
        out[labels == cid] = i
    return out


def build_episode(support_per_class, query_scene: PointCloud, spec: EpisodeSpec) -> Episode:
    """Assemble an Episode from per-class support scenes and one query scene."""
    support = []
    for i, cid in enumerate(spec.novel_classes):
        shots = support_per_class[i]
        if len(shots) != spec.k_shot:
            raise ValueError(f"class {cid} needs {spec.k_shot} shots, got {len(shots)}")
        for cloud in shots:
            support.append((cloud, cloud.labels == cid))
    query = PointCloud(
        query_scene.points,
        remap_query_labels(query_scene.labels, spec.novel_classes),
        scene_id=query_scene.scene_id,
    )
    return Episode(
        support=support,
        query=query,
        spec=spec,
        query_original_labels=query_scene.labels.copy(),
    )


def sample_episode(scenes, spec: EpisodeSpec) -> Episode:
    """Draw support and query scenes for the spec; query never reused as support.

    Deterministic under spec.seed. Raises DataError("insufficient support")
    when a class lacks K scenes and DataError("no query") when no eligible
    query scene remains.
    """
    rng = substream(spec.seed, "episode")
    eligible = {
        cid: [i for i, s in enumerate(scenes) if cid in s.class_set()] for cid in spec.novel_classes
    }
    used: set = set()
    support_per_class = []
    for cid in spec.novel_classes:
        avail = [i for i in eligible[cid] if i not in used]
        if len(avail) < spec.k_shot:
            raise DataError(f"insufficient support: class {cid} has {len(avail)} usable scenes, need {spec.k_shot}")
        picked = rng.choice(np.asarray(avail), size=spec.k_shot, replace=False)
        used.update(int(i) for i in picked)
        support_per_class.append([scenes[int(i)] for i in picked])
    query_pool = [
        i for i, s in enumerate(scenes) if i not in used and s.class_set() & set(spec.novel_classes)
    ]
    if not query_pool:
        raise DataError("no query: every scene with a novel class is used as support")
    query = scenes[int(rng.choice(np.asarray(query_pool)))]
    return build_episode(support_per_class, query, spec)


# ---------------------------------------------------------------------------
# scene CSV I/O


def save_scene(path, cloud: PointCloud):
    d_pt = cloud.points.shape[1]
    if d_pt == 3:
        header = "# x,y,z,label\n"
    elif d_pt == 6:
        header = "# x,y,z,r,g,b,label\n"
    else:
        raise ValueError(f"scene CSV supports 3 or 6 point columns, got {d_pt}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(header)
        for row, label in zip(cloud.points, cloud.labels):
            fh.write(",".join(f"{v:.17g}" for v in row) + f",{int(label)}\n")


def load_scene(path) -> PointCloud:
    points, labels = [], []
    width = None
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"{path}: cannot read scene ({exc})") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split(",")
            if len(fields) not in (4, 7):
                raise DataError(f"{path}:{lineno}: expected 4 or 7 fields, got {len(fields)}")
            if width is None:
                width = len(fields)
            elif len(fields) != width:
                raise DataError(f"{path}:{lineno}: inconsistent field count ({len(fields)} vs {width})")
            try:
                coords = [float(v) for v in fields[:-1]]
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric coordinate field") from None
            try:
                label = int(fields[-1])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric label field") from None
            if label < -1:
                raise DataError(f"{path}:{lineno}: label {label} out of range (must be >= -1)")
            points.append(coords)
            labels.append(label)
    if not points:
        raise DataError(f"{path}: empty scene")
    return PointCloud(np.asarray(points), np.asarray(labels), scene_id=os.path.basename(str(path)))


def save_scene_dir(dirpath, scenes) -> list:
    """Write scenes as scene_0000.csv ... and return the paths."""
    os.makedirs(dirpath, exist_ok=True)
    paths = []
    for i, scene in enumerate(scenes):
        p = os.path.join(dirpath, f"scene_{i:04d}.csv")
        save_scene(p, scene)
        paths.append(p)
    return paths


def load_scene_dir(dirpath) -> list:
    try:
        names = sorted(f for f in os.listdir(dirpath) if f.endswith(".csv"))
    except OSError as exc:
        raise DataError(f"{dirpath}: cannot list scene directory ({exc})") from exc
    if not names:
        raise DataError(f"{dirpath}: no scene CSV files")
    return [load_scene(os.path.join(dirpath, f)) for f in names]


# ---------------------------------------------------------------------------
# episode manifests


def save_episode_manifest(path, spec: EpisodeSpec, support_paths_per_class, query_path):
    doc = {
        "n_way": spec.n_way,
        "k_shot": spec.k_shot,
        "novel_classes": spec.novel_classes,
        "seed": spec.seed,
        "support": {str(cid): list(paths) for cid, paths in zip(spec.novel_classes, support_paths_per_class)},
        "query": str(query_path),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_episode_manifest(path) -> Episode:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        spec = EpisodeSpec(doc["n_way"], doc["k_shot"], doc["novel_classes"], doc.get("seed", 0))
        support_per_class = [
            [load_scene(p) for p in doc["support"][str(cid)]] for cid in spec.novel_classes
        ]
        query = load_scene(doc["query"])
    except (KeyError, json.JSONDecodeError, OSError) as exc:
        raise DataError(f"{path}: malformed episode manifest ({exc})") from exc
    return build_episode(support_per_class, query, spec)
