"""Run configuration: JSON config files, defaults and the run manifest.

The config file is a JSON document with sections ``model``, ``dpr``,
``vpir``, ``train`` and ``data``; unknown keys are rejected so typos fail
loudly. A run manifest is the resolved config plus the root seed and a
content hash, written next to every training output.
"""

import copy
import hashlib
import json

from upl.errors import DataError
from upl.model import ModelConfig
from upl.training import TrainConfig

DEFAULT_CONFIG = {
    "model": {
        "d_f": 64,
        "hidden": 64,
        "n_tok": 128,
        "k_neighbors": 8,
        "m_sub": 1,
        "temperature": 0.1,
        "pseudo_confidence": 0.5,
    },
    "dpr": {"enabled": True, "gate_granularity": "vector", "conv_width": 1},
    "vpir": {"enabled": True, "sigma_clamp": [-5.0, 2.0], "train_samples": 1},
    "train": {
        "epochs": 10,
        "episodes_per_epoch": 20,
        "beta_max": 0.1,
        "warmup_epochs": None,
        "learning_rate": 1e-3,
        "optimizer": "adam",
        "n_way": 1,
        "k_shot": 1,
    },
    "data": {"novel_classes": [], "base_classes": []},
}


def default_config() -> dict:
    return copy.deepcopy(DEFAULT_CONFIG)


def _merge(base: dict, override: dict, path="") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in base:
            raise DataError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise DataError(f"config key {path + key!r} must be a section")
            out[key] = _merge(base[key], value, path=f"{path}{key}.")
        else:
            out[key] = value
    return out


def load_config(path=None) -> dict:
    """Config file merged over defaults (defaults alone when path is None)."""
    if path is None:
        return default_config()
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (json.JSONDecodeError, OSError) as exc:
        raise DataError(f"{path}: cannot load config ({exc})") from exc
    if not isinstance(doc, dict):
        raise DataError(f"{path}: config must be a JSON object")
    return _merge(default_config(), doc)


def model_config(cfg: dict, d_in: int, n_way: int, base_classes) -> ModelConfig:
    m, dpr, vpir = cfg["model"], cfg["dpr"], cfg["vpir"]
    return ModelConfig(
        n_way=n_way,
        d_in=d_in,
        d_f=m["d_f"],
        hidden=m["hidden"],
        n_tok=m["n_tok"],
        k_neighbors=m["k_neighbors"],
        m_sub=m["m_sub"],
        temperature=m["temperature"],
        pseudo_confidence=m["pseudo_confidence"],
        dpr_enabled=dpr["enabled"],
        conv_width=dpr["conv_width"],
        gate_granularity=dpr["gate_granularity"],
        vpir_enabled=vpir["enabled"],
        sigma_clamp=tuple(vpir["sigma_clamp"]),
        train_samples=vpir["train_samples"],
        base_classes=tuple(base_classes),
    )


def train_config(cfg: dict, seed: int, novel_pool) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(
        epochs=t["epochs"],
        episodes_per_epoch=t["episodes_per_epoch"],
        beta_max=t["beta_max"],
        warmup_epochs=t["warmup_epochs"],
        learning_rate=t["learning_rate"],
        optimizer=t["optimizer"],
        n_way=t["n_way"],
        k_shot=t["k_shot"],
        novel_pool=tuple(novel_pool),
        seed=seed,
    )


def canonical_json(doc) -> str:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"))


def run_id(cfg: dict, seed: int) -> str:
    """Short content hash of config + seed: identical manifests imply
    byte-identical outputs."""
    digest = hashlib.sha256(canonical_json({"config": cfg, "seed": seed}).encode("utf-8"))
    return digest.hexdigest()[:12]


def save_run_manifest(path, cfg: dict, seed: int):
    doc = {"config": cfg, "seed": seed, "run_id": run_id(cfg, seed)}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_run_manifest(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        _ = doc["config"], doc["seed"]
    except (json.JSONDecodeError, KeyError, OSError) as exc:
        raise DataError(f"{path}: malformed run manifest ({exc})") from exc
    return doc
