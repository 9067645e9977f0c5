"""Pipeline orchestration CLI: tile, split, pretrain, train, predict, eval.

One JSON config drives every subcommand; a few common knobs have flag
overrides. Outputs are a pure function of (config, seed), so reruns are
byte-identical. Exit codes: 0 success, 1 internal failure, 2 usage or input
error.

Dataset manifest CSV: ``slide_id,patient_id,label,image_path`` with label CE,
LAA, or empty for unlabeled slides. The MILBENCH_SEED environment variable
overrides the config seed.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
from dataclasses import dataclass, field

import numpy as np

from . import evalkit, mil_head, ssl_pretrain
from .augment import AugmentSpec
from .embedder import ToyEncoderParams, encode_bag, init_toy_encoder
from .evalkit import CLASS_NAMES
from .mil_head import TrainConfig
from .rng import phase_seed
from .slides import DecodeError, load_slide
from .ssl_pretrain import SSLConfig
from .tiler import TileBag, TilerConfig, build_bag, grid_shape, read_manifest, write_manifest

SEED_ENV_VAR = "MILBENCH_SEED"

# Phase tags for deriving per-stage seeds from the global seed.
PHASE_SPLIT, PHASE_PRETRAIN, PHASE_TRAIN = 1, 2, 3


class InputError(Exception):
    """Usage or input problem: maps to exit code 2."""


@dataclass
class EncoderConfig:
    patch_size: int = 96
    dim: int = 64  # desk-scale default; the reference backbone width is 1536

    def validate(self) -> None:
        if self.patch_size < 1 or self.dim < 1:
            raise ValueError("encoder patch_size and dim must be >= 1")


@dataclass
class PipelineConfig:
    dataset_manifest: str = ""
    output_dir: str = "out"
    seed: int = 42
    k_folds: int = 5
    jobs: int = 1
    tiler: TilerConfig = field(default_factory=TilerConfig)
    augment: AugmentSpec = field(default_factory=AugmentSpec)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    ssl: SSLConfig = field(default_factory=SSLConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ssl_seed_set: bool = False
    train_seed_set: bool = False


def _build_section(cls, raw: dict, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(raw) - known
    if unknown:
        raise InputError(f"unknown keys in config section {name!r}: {sorted(unknown)}")
    kwargs = dict(raw)
    for key in ("brightness_delta_range", "contrast_factor_range", "rotation_set",
                "class_weights"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return cls(**kwargs)


def load_config(path: str | None) -> PipelineConfig:
    raw = {}
    if path is not None:
        if not os.path.exists(path):
            raise InputError(f"config file not found: {path}")
        with open(path, "r", encoding="utf-8") as fh:
            raw = json.load(fh)

    cfg = PipelineConfig(
        dataset_manifest=raw.get("dataset_manifest", ""),
        output_dir=raw.get("output_dir", "out"),
        seed=int(raw.get("seed", 42)),
        k_folds=int(raw.get("k_folds", 5)),
        jobs=int(raw.get("jobs", 1)),
        tiler=_build_section(TilerConfig, raw.get("tiler", {}), "tiler"),
        augment=_build_section(AugmentSpec, raw.get("augment", {}), "augment"),
        encoder=_build_section(EncoderConfig, raw.get("encoder", {}), "encoder"),
        ssl=_build_section(SSLConfig, raw.get("ssl", {}), "ssl"),
        train=_build_section(TrainConfig, raw.get("train", {}), "train"),
        ssl_seed_set="seed" in raw.get("ssl", {}),
        train_seed_set="seed" in raw.get("train", {}),
    )

    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        cfg.seed = int(env_seed)
    if not cfg.ssl_seed_set:
        cfg.ssl.seed = phase_seed(cfg.seed, PHASE_PRETRAIN)
    if not cfg.train_seed_set:
        cfg.train.seed = phase_seed(cfg.seed, PHASE_TRAIN)
    return cfg


def _apply_overrides(cfg: PipelineConfig, args: argparse.Namespace) -> PipelineConfig:
    if getattr(args, "manifest", None):
        cfg.dataset_manifest = args.manifest
    if getattr(args, "output_dir", None):
        cfg.output_dir = args.output_dir
    if getattr(args, "jobs", None):
        cfg.jobs = args.jobs
    if getattr(args, "seed", None) is not None and SEED_ENV_VAR not in os.environ:
        cfg.seed = args.seed
        if not cfg.ssl_seed_set:
            cfg.ssl.seed = phase_seed(cfg.seed, PHASE_PRETRAIN)
        if not cfg.train_seed_set:
            cfg.train.seed = phase_seed(cfg.seed, PHASE_TRAIN)
    if getattr(args, "tile_size", None):
        cfg.tiler.tile_size = args.tile_size
    if getattr(args, "bag_size", None):
        cfg.tiler.bag_size = args.bag_size
    if getattr(args, "input_size", None):
        cfg.tiler.model_input_size = args.input_size
    if getattr(args, "edge_policy", None):
        cfg.tiler.edge_policy = args.edge_policy
    if getattr(args, "k_folds", None):
        cfg.k_folds = args.k_folds
    if getattr(args, "aug_spec", None):
        if not os.path.exists(args.aug_spec):
            raise InputError(f"augmentation spec not found: {args.aug_spec}")
        with open(args.aug_spec, "r", encoding="utf-8") as fh:
            cfg.augment = AugmentSpec.from_json(fh.read())
    return cfg


@dataclass
class DatasetEntry:
    slide_id: str
    patient_id: str
    label: str | None
    image_path: str


def read_dataset_manifest(path: str) -> list[DatasetEntry]:
    if not os.path.exists(path):
        raise InputError(f"dataset manifest not found: {path}")
    entries = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["slide_id", "patient_id", "label", "image_path"]:
            raise InputError(f"bad dataset manifest header in {path}: {header}")
        base = os.path.dirname(os.path.abspath(path))
        for slide_id, patient_id, label, image_path in reader:
            if label and label not in CLASS_NAMES:
                raise InputError(f"slide {slide_id}: label must be CE, LAA or empty, got {label!r}")
            if not os.path.isabs(image_path):
                image_path = os.path.join(base, image_path)
            entries.append(DatasetEntry(slide_id, patient_id, label or None, image_path))
    if not entries:
        raise InputError(f"dataset manifest {path} lists no slides")
    return entries


def _tiles_dir(cfg: PipelineConfig) -> str:
    return os.path.join(cfg.output_dir, "tiles")


def _slide_manifest_path(cfg: PipelineConfig, slide_id: str) -> str:
    return os.path.join(_tiles_dir(cfg), f"{slide_id}.csv")


def cmd_tile(cfg: PipelineConfig) -> int:
    entries = read_dataset_manifest(cfg.dataset_manifest)
    cfg.tiler.validate()
    out_dir = _tiles_dir(cfg)
    os.makedirs(out_dir, exist_ok=True)

    failures = []
    for entry in entries:
        manifest_path = _slide_manifest_path(cfg, entry.slide_id)
        try:
            slide = load_slide(entry.image_path, entry.slide_id, entry.patient_id, entry.label)
            rows_n, cols_n = grid_shape(slide, cfg.tiler)
            bag = build_bag(slide, cfg.tiler, jobs=cfg.jobs)
            write_manifest([bag], manifest_path, jobs=cfg.jobs)
            print(f"{entry.slide_id}: scanned {rows_n * cols_n} grid tiles, "
                  f"wrote bag of {len(bag.tiles)}")
        except (OSError, DecodeError, ValueError) as exc:
            # drop partial outputs for this slide
            for leftover in [manifest_path] + [
                os.path.join(out_dir, f"{entry.slide_id}_{rank}.png")
                for rank in range(cfg.tiler.bag_size)
            ]:
                if os.path.exists(leftover):
                    os.remove(leftover)
            failures.append((entry.slide_id, str(exc)))
            print(f"{entry.slide_id}: FAILED ({exc})", file=sys.stderr)

    if failures:
        print(f"{len(failures)} slide(s) failed", file=sys.stderr)
        return 2
    return 0


def cmd_split(cfg: PipelineConfig) -> int:
    entries = read_dataset_manifest(cfg.dataset_manifest)
    if cfg.k_folds < 2:
        raise InputError(f"split requires k_folds >= 2, got {cfg.k_folds}")
    labeled = [(e.patient_id, CLASS_NAMES.index(e.label)) for e in entries if e.label]
    if not labeled:
        raise InputError("no labeled slides in dataset manifest")
    try:
        assignment = evalkit.stratified_group_kfold(
            labeled, cfg.k_folds, seed=phase_seed(cfg.seed, PHASE_SPLIT))
    except ValueError as exc:
        raise InputError(str(exc)) from exc

    os.makedirs(cfg.output_dir, exist_ok=True)
    folds_path = os.path.join(cfg.output_dir, "folds.csv")
    evalkit.write_folds(assignment, folds_path)

    counts = np.zeros((cfg.k_folds, 2), dtype=int)
    for patient_id, label in labeled:
        counts[assignment.fold_of(patient_id), label] += 1
    print("fold  CE  LAA")
    for f in range(cfg.k_folds):
        print(f"{f:4d}  {counts[f, 0]:3d} {counts[f, 1]:4d}")
    print(f"wrote {folds_path}")
    return 0


def _load_bags(cfg: PipelineConfig, entries: list[DatasetEntry]) -> list[TileBag]:
    from PIL import Image

    tiles_dir = _tiles_dir(cfg)
    bags = []
    for entry in entries:
        manifest_path = _slide_manifest_path(cfg, entry.slide_id)
        if not os.path.exists(manifest_path):
            raise InputError(f"missing tile manifest {manifest_path}; run `milbench tile` first")
        rows = read_manifest(manifest_path)
        tiles = []
        for row in rows:
            tile_path = os.path.join(tiles_dir, row.tile_path)
            if not os.path.exists(tile_path):
                raise InputError(f"missing tile image {tile_path}; rerun `milbench tile`")
            with Image.open(tile_path) as img:
                tiles.append(np.asarray(img.convert("RGB"), dtype=np.uint8))
        bags.append(TileBag(entry.slide_id, entry.patient_id, entry.label, tiles, []))
    return bags


def _encoder_path(cfg: PipelineConfig) -> str:
    return os.path.join(cfg.output_dir, "encoder.milp")


def cmd_pretrain(cfg: PipelineConfig) -> int:
    entries = read_dataset_manifest(cfg.dataset_manifest)
    cfg.ssl.validate()
    bags = _load_bags(cfg, entries)
    corpus = [tile for bag in bags for tile in bag.tiles]

    view_side = min(cfg.augment.crop_size, cfg.tiler.model_input_size)
    if view_side % cfg.encoder.patch_size != 0:
        raise InputError(
            f"view side {view_side} not divisible by encoder patch_size "
            f"{cfg.encoder.patch_size}")
    try:
        result = ssl_pretrain.pretrain(corpus, cfg.augment, cfg.ssl,
                                       cfg.encoder.patch_size, cfg.encoder.dim)
    except ValueError as exc:
        raise InputError(str(exc)) from exc

    os.makedirs(cfg.output_dir, exist_ok=True)
    ssl_pretrain.save_toy_encoder(result.encoder, _encoder_path(cfg))
    ssl_pretrain.write_loss_curve(result.losses, os.path.join(cfg.output_dir, "pretrain_loss.csv"))
    print(f"pretrained encoder on {len(corpus)} tiles for {cfg.ssl.epochs} epochs; "
          f"final mean loss {result.losses[-1]:.6f}" if result.losses else "no epochs run")
    return 0


def _resolve_encoder(cfg: PipelineConfig) -> ToyEncoderParams:
    """Pretrained encoder when present, otherwise seeded random init."""
    path = _encoder_path(cfg)
    if os.path.exists(path):
        print(f"using pretrained encoder {path}")
        return ssl_pretrain.load_toy_encoder(path)
    print("no pretrained encoder found; using random initialization")
    return init_toy_encoder(cfg.encoder.patch_size, cfg.encoder.dim,
                            phase_seed(cfg.seed, PHASE_PRETRAIN))


def _embed_all(cfg: PipelineConfig, entries: list[DatasetEntry]):
    if cfg.tiler.model_input_size % cfg.encoder.patch_size != 0:
        raise InputError(
            f"model_input_size {cfg.tiler.model_input_size} not divisible by "
            f"encoder patch_size {cfg.encoder.patch_size}")
    encoder = _resolve_encoder(cfg)
    bags = _load_bags(cfg, entries)
    return [encode_bag(bag, encoder, jobs=cfg.jobs) for bag in bags]


def cmd_train(cfg: PipelineConfig) -> int:
    entries = read_dataset_manifest(cfg.dataset_manifest)
    labeled = [e for e in entries if e.label]
    if not labeled:
        raise InputError("training requires labeled slides")
    folds_path = os.path.join(cfg.output_dir, "folds.csv")
    if not os.path.exists(folds_path):
        raise InputError(f"missing fold file {folds_path}; run `milbench split` first")
    assignment = evalkit.read_folds(folds_path)

    embedded = _embed_all(cfg, labeled)
    labels = np.array([CLASS_NAMES.index(e.label) for e in labeled])

    fold_losses = []
    oof: list[tuple[str, float, float]] = []
    for fold in range(assignment.k):
        val_idx = [i for i, e in enumerate(labeled)
                   if assignment.fold_of(e.patient_id) == fold]
        train_idx = [i for i in range(len(labeled)) if i not in set(val_idx)]
        if not val_idx:
            raise InputError(f"fold {fold} has no validation slides")
        try:
            result = mil_head.train_fold(
                [embedded[i] for i in train_idx], labels[train_idx],
                [embedded[i] for i in val_idx], labels[val_idx], cfg.train)
        except ValueError as exc:
            raise InputError(f"fold {fold}: {exc}") from exc
        mil_head.save_head_params(result.params,
                                  os.path.join(cfg.output_dir, f"fold{fold}.milw"),
                                  k=cfg.tiler.bag_size,
                                  l=embedded[0].tokens_per_tile)
        oof.extend(mil_head.predict([embedded[i] for i in val_idx], result.params))
        fold_losses.append(result.val_losses[-1] if result.val_losses else float("nan"))
        print(f"fold {fold}: train n={len(train_idx)} val n={len(val_idx)} "
              f"val_logloss={fold_losses[-1]:.6f}")

    oof.sort(key=lambda p: p[0])
    mil_head.write_predictions(oof, os.path.join(cfg.output_dir, "oof_predictions.csv"))

    # pooled out-of-fold loss is the headline CV metric; per-fold mean (std)
    # is emitted alongside in the reference reporting style
    label_of = {e.slide_id: CLASS_NAMES.index(e.label) for e in labeled}
    oof_labels = np.array([label_of[sid] for sid, _, _ in oof])
    oof_probs = np.array([[p0, p1] for _, p0, p1 in oof])
    oof_loss = evalkit.weighted_log_loss(oof_labels, oof_probs,
                                         cfg.train.class_weights, cfg.train.prob_clip)

    mean, std = float(np.mean(fold_losses)), float(np.std(fold_losses))
    summary = f"cv_logloss {mean:.3g} ({std:.2g})"
    report_path = os.path.join(cfg.output_dir, "cv_report.txt")
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(f"# class_weights CE={cfg.train.class_weights[0]} "
                 f"LAA={cfg.train.class_weights[1]}\n")
        for fold, loss in enumerate(fold_losses):
            fh.write(f"fold{fold} val_logloss {loss:.9f}\n")
        fh.write(f"oof_logloss {oof_loss:.9f}\n")
        fh.write(summary + "\n")
    print(f"oof_logloss {oof_loss:.6f}")
    print(summary)
    return 0


def cmd_predict(cfg: PipelineConfig, weights: str) -> int:
    if not os.path.exists(weights):
        raise InputError(f"missing weights file {weights}")
    entries = read_dataset_manifest(cfg.dataset_manifest)
    embedded = _embed_all(cfg, entries)
    params, _ = mil_head.load_head_params(weights)
    preds = mil_head.predict(embedded, params)
    os.makedirs(cfg.output_dir, exist_ok=True)
    out_path = os.path.join(cfg.output_dir, "predictions.csv")
    mil_head.write_predictions(preds, out_path)
    print(f"wrote {out_path} ({len(preds)} slides)")
    return 0


def cmd_eval(cfg: PipelineConfig, predictions_path: str) -> int:
    if not os.path.exists(predictions_path):
        raise InputError(f"missing predictions file {predictions_path}")
    entries = read_dataset_manifest(cfg.dataset_manifest)
    labels = {e.slide_id: e.label for e in entries if e.label}
    preds = mil_head.read_predictions(predictions_path)
    pairs = [(p_ce, CLASS_NAMES.index(labels[sid]))
             for sid, p_ce, _ in preds if sid in labels]
    if not pairs:
        raise InputError("no predictions with labeled slides to evaluate")

    labeled_preds = [(sid, p0, p1) for sid, p0, p1 in preds if sid in labels]
    y = np.array([CLASS_NAMES.index(labels[sid]) for sid, _, _ in labeled_preds])
    probs = np.array([[p0, p1] for _, p0, p1 in labeled_preds])
    logloss = evalkit.weighted_log_loss(y, probs, cfg.train.class_weights,
                                        cfg.train.prob_clip)

    sweep = evalkit.sweep_threshold(pairs)
    cm = evalkit.confusion_at_threshold(pairs, sweep.best_threshold)

    os.makedirs(cfg.output_dir, exist_ok=True)
    evalkit.write_curve(sweep, os.path.join(cfg.output_dir, "threshold_curve.csv"))
    evalkit.write_confusion(cm, os.path.join(cfg.output_dir, "confusion.csv"))
    best_line = (f"best threshold {sweep.best_threshold:.2f} "
                 f"weighted f1 {sweep.best_weighted_f1:.4f}")
    with open(os.path.join(cfg.output_dir, "metrics.txt"), "w", encoding="utf-8") as fh:
        fh.write(f"# class_weights CE={cfg.train.class_weights[0]} "
                 f"LAA={cfg.train.class_weights[1]}\n")
        fh.write(f"logloss {logloss:.9f}\n")
        fh.write(best_line + "\n")
    print(f"logloss {logloss:.6f} on {len(pairs)} labeled slides")
    print(best_line)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="milbench",
        description="Whole-slide-image MIL pipeline: tile, split, pretrain, train, evaluate.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="pipeline config JSON")
        p.add_argument("--manifest", help="dataset manifest CSV override")
        p.add_argument("--output-dir", help="output directory override")
        p.add_argument("--seed", type=int, help="global seed override")
        p.add_argument("--jobs", type=int, help="worker parallelism")

    p_tile = sub.add_parser("tile", help="extract darkest-tile bags per slide")
    common(p_tile)
    p_tile.add_argument("--tile-size", type=int)
    p_tile.add_argument("--bag-size", type=int)
    p_tile.add_argument("--input-size", type=int)
    p_tile.add_argument("--edge-policy", choices=["pad_white", "discard_partial"])

    p_split = sub.add_parser("split", help="patient-grouped stratified folds")
    common(p_split)
    p_split.add_argument("--k-folds", type=int)

    p_pre = sub.add_parser("pretrain", help="contrastive encoder pretraining")
    common(p_pre)
    p_pre.add_argument("--aug-spec", help="augmentation spec JSON file")

    p_train = sub.add_parser("train", help="cross-validated MIL head training")
    common(p_train)

    p_pred = sub.add_parser("predict", help="per-slide probabilities from saved weights")
    common(p_pred)
    p_pred.add_argument("--weights", required=True, help="MILW head weights file")

    p_eval = sub.add_parser("eval", help="threshold sweep and confusion matrix")
    common(p_eval)
    p_eval.add_argument("--predictions", required=True, help="predictions CSV")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        if args.command == "tile":
            return cmd_tile(cfg)
        if args.command == "split":
            return cmd_split(cfg)
        if args.command == "pretrain":
            return cmd_pretrain(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "predict":
            return cmd_predict(cfg, args.weights)
        if args.command == "eval":
            return cmd_eval(cfg, args.predictions)
        parser.error(f"unknown command {args.command}")
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level failure boundary
        print(f"internal error: {exc}", file=sys.stderr)
        return 1
    return 0


def entrypoint() -> None:
    sys.exit(main())
