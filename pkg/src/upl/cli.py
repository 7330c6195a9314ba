"""Command-line entry points: synthetic data generation, training, evaluation.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Every command is deterministic under a fixed seed and config; the
environment variable UPL_THREADS caps internal parallelism (default 1).
"""

import argparse
import os
import sys

from upl import config as config_mod
from upl import training as training_mod
from upl.data import SyntheticSceneConfig, generate_synthetic_scene, load_scene_dir, save_scene_dir
from upl.errors import DataError, NumericError
from upl.metrics import save_reliability_csv
from upl.model import FewShotModel
from upl.predictor import save_predictions, save_uncertainty_heatmap
from upl.rng import substream


def _parse_int_list(text: str) -> list:
    try:
        return [int(v) for v in text.split(",") if v.strip() != ""]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="upl", description="Few-shot point-cloud segmentation with uncertainty-aware prototypes")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate synthetic scenes")
    gen.add_argument("--out", required=True, help="output scene directory")
    gen.add_argument("--classes", type=int, required=True, help="number of classes per scene (ids 0..C-1)")
    gen.add_argument("--scenes", type=int, required=True, help="number of scenes")
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--points", type=int, default=64, help="points per object blob")
    gen.add_argument("--objects", type=int, default=1, help="object blobs per class")
    gen.add_argument("--jitter", type=float, default=0.3, help="within-blob point spread")
    gen.add_argument("--gap", type=float, default=5.0, help="minimum distance between blob centers")
    gen.set_defaults(func=cmd_gen)

    train = sub.add_parser("train", help="train on a scene directory")
    train.add_argument("--data", required=True, help="scene directory")
    train.add_argument("--out", required=True, help="run output directory")
    train.add_argument("--config", default=None, help="JSON config file")
    train.add_argument("--seed", type=int, default=0)
    train.add_argument("--epochs", type=int, default=None)
    train.add_argument("--episodes-per-epoch", type=int, default=None)
    train.add_argument("--n-way", type=int, default=None)
    train.add_argument("--k-shot", type=int, default=None)
    train.add_argument("--lr", type=float, default=None)
    train.add_argument("--beta-max", type=float, default=None)
    train.add_argument("--warmup-epochs", type=int, default=None)
    train.add_argument("--no-dpr", action="store_true", help="disable dual-stream prototype refinement")
    train.add_argument("--no-vpir", action="store_true", help="disable variational prototype inference")
    train.add_argument("--novel-classes", type=_parse_int_list, default=None, help="comma-separated novel class pool")
    train.add_argument("--base-classes", type=_parse_int_list, default=None, help="comma-separated base class ids")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate a checkpoint")
    ev.add_argument("--data", required=True, help="scene directory (held-out)")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--out", required=True)
    ev.add_argument("--config", default=None, help="run manifest (default: <checkpoint dir>/config.json)")
    ev.add_argument("--samples", type=_parse_int_list, default=[3], help="Monte Carlo sample counts T, comma-separated")
    ev.add_argument("--episodes", type=int, default=50)
    ev.add_argument("--seed", type=int, default=0)
    ev.add_argument("--n-way", type=int, default=None)
    ev.add_argument("--k-shot", type=int, default=None)
    ev.add_argument("--export-uncertainty", action="store_true", help="write per-point prediction and heatmap CSVs")
    ev.set_defaults(func=cmd_eval)

    return parser


def cmd_gen(args) -> int:
    parser_error = args._parser.error
    if args.scenes < 1:
        parser_error("--scenes must be >= 1")
    if args.classes < 1:
        parser_error("--classes must be >= 1")
    seed_rng = substream(args.seed, "data")
    scene_seeds = seed_rng.integers(2**62, size=args.scenes)
    class_ids = list(range(args.classes))
    scenes = []
    for s in scene_seeds:
        cfg = SyntheticSceneConfig(
            points_per_object=args.points,
            objects_per_scene=args.objects,
            intra_class_jitter=args.jitter,
            inter_class_gap=args.gap,
            seed=int(s),
        )
        scenes.append(generate_synthetic_scene(cfg, class_ids))
    paths = save_scene_dir(args.out, scenes)
    total_points = sum(s.n for s in scenes)
    print(f"wrote {len(paths)} scenes ({total_points} points, classes 0..{args.classes - 1}) to {args.out}")
    return 0


def _resolve_train_setup(args, scenes):
    cfg = config_mod.load_config(args.config)
    t = cfg["train"]
    for key, value in (
        ("epochs", args.epochs),
        ("episodes_per_epoch", args.episodes_per_epoch),
        ("n_way", args.n_way),
        ("k_shot", args.k_shot),
        ("learning_rate", args.lr),
        ("beta_max", args.beta_max),
        ("warmup_epochs", args.warmup_epochs),
    ):
        if value is not None:
            t[key] = value
    if args.no_dpr:
        cfg["dpr"]["enabled"] = False
    if args.no_vpir:
        cfg["vpir"]["enabled"] = False
    if args.novel_classes is not None:
        cfg["data"]["novel_classes"] = args.novel_classes
    if args.base_classes is not None:
        cfg["data"]["base_classes"] = args.base_classes

    all_classes = sorted(set().union(*(s.class_set() for s in scenes)))
    base = list(cfg["data"]["base_classes"])
    pool = list(cfg["data"]["novel_classes"]) or [c for c in all_classes if c not in base]
    cfg["data"]["novel_classes"] = pool
    return cfg, pool, base


def cmd_train(args) -> int:
    scenes = load_scene_dir(args.data)
    cfg, pool, base = _resolve_train_setup(args, scenes)
    os.makedirs(args.out, exist_ok=True)

    d_in = scenes[0].points.shape[1]
    train_cfg = config_mod.train_config(cfg, args.seed, pool)
    model_cfg = config_mod.model_config(cfg, d_in, train_cfg.n_way, base)
    model = FewShotModel(model_cfg, substream(args.seed, "init"))

    log_rows: list = []
    training_mod.train(model, scenes, train_cfg, log_rows)

    config_mod.save_run_manifest(os.path.join(args.out, "config.json"), cfg, args.seed)
    model.store.save(os.path.join(args.out, "checkpoint.upl"))
    training_mod.write_train_log(os.path.join(args.out, "train_log.csv"), log_rows)
    final = log_rows[-1] if log_rows else {"total": float("nan")}
    print(f"trained {train_cfg.epochs} epochs x {train_cfg.episodes_per_epoch} episodes; final total loss {final['total']:.4f}")
    print(f"run id {config_mod.run_id(cfg, args.seed)}; outputs in {args.out}")
    return 0


def cmd_eval(args) -> int:
    scenes = load_scene_dir(args.data)
    manifest_path = args.config or os.path.join(os.path.dirname(os.path.abspath(args.checkpoint)), "config.json")
    manifest = config_mod.load_run_manifest(manifest_path)
    cfg = config_mod._merge(config_mod.default_config(), manifest["config"])

    n_way = args.n_way if args.n_way is not None else cfg["train"]["n_way"]
    k_shot = args.k_shot if args.k_shot is not None else cfg["train"]["k_shot"]
    pool = cfg["data"]["novel_classes"]
    base = cfg["data"]["base_classes"]
    d_in = scenes[0].points.shape[1]

    model_cfg = config_mod.model_config(cfg, d_in, n_way, base)
    model = FewShotModel(model_cfg, substream(0, "init"))
    model.store.load(args.checkpoint)

    os.makedirs(args.out, exist_ok=True)
    episodes = training_mod.episode_stream(scenes, n_way, k_shot, pool, args.seed, args.episodes, name="eval-episodes")

    rows = []
    for T in args.samples:
        if T < 1:
            raise DataError(f"sample count must be >= 1, got {T}")
        report, outputs = training_mod.evaluate(model, episodes, T, seed=args.seed)
        rows.append((T, report))
        save_reliability_csv(os.path.join(args.out, f"reliability_T{T}.csv"), report.bins)
        print(f"T={T}: mIoU {report.miou:.4f}  ECE {report.ece:.4f}  ({report.episodes} episodes)")
        if args.export_uncertainty and T == args.samples[-1]:
            pred_dir = os.path.join(args.out, f"predictions_T{T}")
            os.makedirs(pred_dir, exist_ok=True)
            for i, (episode, out) in enumerate(zip(episodes, outputs)):
                save_predictions(os.path.join(pred_dir, f"episode_{i:03d}.csv"), out, episode.query.labels)
                save_uncertainty_heatmap(
                    os.path.join(pred_dir, f"heatmap_{i:03d}.csv"), episode.query.coords, out, episode.query.labels
                )

    with open(os.path.join(args.out, "metrics.csv"), "w", encoding="utf-8") as fh:
        fh.write("T,episodes,miou,ece\n")
        for T, report in rows:
            fh.write(f"{T},{report.episodes},{report.miou:.17g},{report.ece:.17g}\n")
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args._parser = parser
    try:
        return args.func(args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
