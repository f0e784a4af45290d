"""Command-line surface: train / render / query / eval / synth.

Every command is a pure function of its inputs and the seed; exit codes
distinguish configuration errors (2), file-format errors (3), numerical
divergence (4) and IO failures (5).
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import io as sio
from .distill import (SupervisionPair, TrainConfig, build_hybrid_clip,
                      select_gaussians, train)
from .errors import (AnnotationError, ConfigurationError, DivergenceError,
                     FormatError, InvalidParameterError, TrainingError,
                     UsageError)
from .field import HashFeatureField, HashGridConfig, PerGaussianField, bounds_from_points
from .query import QuerySet, detect, miou, map_score, relevancy, segment
from .render import render_features, render_rgb
from .scene import GaussianScene
from .synth import SynthParams, generate


# ------------------------------------------------------------------- helpers

def _resolve(base: Path, rel) -> Path:
    p = Path(rel)
    return p if p.is_absolute() else base / p


def _require(cfg: dict, key: str):
    if key not in cfg:
        raise ConfigurationError(f"config is missing required key {key!r}")
    return cfg[key]


def _build_field(field_cfg: dict, scene: GaussianScene):
    kind = field_cfg.get("field_type", "mhe")
    clip_dim = int(field_cfg.get("clip_dim", 512))
    dino_dim = int(field_cfg.get("dino_dim", 384))
    hidden_width = int(field_cfg.get("hidden_width", 256))
    hidden_layers = int(field_cfg.get("hidden_layers", 3))
    seed = int(field_cfg.get("seed", 0))
    if kind == "per_gaussian":
        enc = int(field_cfg.get("levels", 24)) * int(field_cfg.get("feat_dim", 8)) \
            + int(field_cfg.get("aux_dim", 0))
        return PerGaussianField(len(scene), enc, clip_dim=clip_dim, dino_dim=dino_dim,
                                hidden_width=hidden_width, hidden_layers=hidden_layers,
                                seed=seed)
    if kind != "mhe":
        raise ConfigurationError(f"unknown field_type {kind!r}")
    bounds = field_cfg.get("bounds", "auto")
    if bounds == "auto" or bounds is None:
        lo, hi = bounds_from_points(scene.means)
    else:
        lo, hi = (tuple(float(v) for v in bounds[0]),
                  tuple(float(v) for v in bounds[1]))
    cfg = HashGridConfig(
        levels=int(field_cfg.get("levels", 24)),
        table_size=int(field_cfg.get("table_size", 2 ** 20)),
        feat_dim=int(field_cfg.get("feat_dim", 8)),
        n_min=int(field_cfg.get("n_min", 16)),
        n_max=int(field_cfg.get("n_max", 512)),
        aux_dim=int(field_cfg.get("aux_dim", 0)),
        bounds_lo=lo, bounds_hi=hi)
    return HashFeatureField(cfg, clip_dim=clip_dim, dino_dim=dino_dim,
                            hidden_width=hidden_width, hidden_layers=hidden_layers,
                            seed=seed)


def _train_config(train_cfg: dict, seed: int) -> TrainConfig:
    known = {
        "lambda": "lam", "gamma": "gamma", "delta": "delta", "kernel": "kernel",
        "total_steps": "total_steps", "pixel_loss_start_step": "pixel_loss_start_step",
        "lr_init": "lr_init", "lr_final": "lr_final", "weight_decay": "weight_decay",
        "beta1": "beta1", "beta2": "beta2", "eps": "eps",
        "clip_target_mode": "clip_target_mode", "single_scale_index": "single_scale_index",
    }
    kwargs = {"seed": seed}
    for key, value in train_cfg.items():
        if key not in known:
            raise ConfigurationError(f"unknown train config key {key!r}")
        kwargs[known[key]] = value
    return TrainConfig(**kwargs)


def _load_supervision(pose_path: Path, width: int, height: int) -> list:
    pose_set = sio.load_pose_set(pose_path)
    pairs = []
    for i, frame in enumerate(pose_set.frames):
        if frame.clip_features is None or frame.dino_features is None:
            raise ConfigurationError(
                f"{pose_path}: frame {i} lacks clip/dino feature references")
        clip = sio.read_feature_container(pose_path.parent / frame.clip_features)
        dino = sio.read_feature_container(pose_path.parent / frame.dino_features)
        pyramid = ([(f, np.asarray(m, dtype=np.float64)) for f, m in clip.pyramid]
                   if clip.pyramid else None)
        clip_target = (build_hybrid_clip(pyramid) if pyramid
                       else np.asarray(clip.feature_map, dtype=np.float64))
        if clip_target.shape[:2] != (height, width):
            raise ConfigurationError(
                f"frame {i}: supervision is {clip_target.shape[1]}x{clip_target.shape[0]}, "
                f"render config wants {width}x{height}")
        pairs.append(SupervisionPair(
            camera=frame.camera.scaled(width, height),
            clip_target=clip_target,
            dino_target=np.asarray(dino.feature_map, dtype=np.float64),
            clip_pyramid=pyramid))
    return pairs


def _load_queries(queries_path, canonicals_path) -> QuerySet:
    queries = sio.read_embedding_file(queries_path)
    canonicals = sio.read_embedding_file(canonicals_path)
    return QuerySet(queries=queries,
                    canonicals=np.stack([v for _, v in canonicals]))


# ------------------------------------------------------------------ commands

def cmd_synth(args) -> int:
    params = SynthParams(seed=args.seed, n_regions=args.regions,
                         width=args.width, height=args.height,
                         clip_dim=args.clip_dim, dino_dim=args.dino_dim,
                         n_train_views=args.train_views, n_test_views=args.test_views,
                         total_steps=args.steps)
    fixture = generate(args.out, params)
    print(f"fixture written to {fixture.out_dir} "
          f"({len(fixture.region_labels)} regions, seed {params.seed})")
    return 0


def cmd_train(args) -> int:
    config_path = Path(args.config)
    cfg = sio.load_run_config(config_path)
    base = config_path.parent

    scene = sio.load_gaussian_scene(_resolve(base, _require(cfg, "scene")))
    render_cfg = cfg.get("render", {})
    width = int(render_cfg.get("feature_width", 480))
    height = int(render_cfg.get("feature_height", 270))
    pairs = _load_supervision(_resolve(base, _require(cfg, "poses")), width, height)

    sel_cfg = cfg.get("selection", {})
    mask, sel_info = select_gaussians(
        scene, [p.camera for p in pairs],
        min_radius_px=float(sel_cfg.get("min_radius_px", 2.0)),
        target_fraction=float(sel_cfg.get("target_fraction", 0.40)))
    scene = scene.with_selection(mask)
    print(sel_info["note"])

    field = _build_field(cfg.get("field", {}), scene)
    train_config = _train_config(cfg.get("train", {}), seed=int(cfg.get("seed", 0)))
    result = train(scene, field, pairs, train_config)

    out_dir = _resolve(base, cfg.get("output_dir", "run"))
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt = out_dir / "checkpoint.fmgs"
    sio.save_field_checkpoint(ckpt, result.field, np.flatnonzero(mask))
    with open(out_dir / "metrics.jsonl", "w") as fh:
        for record in result.metrics:
            fh.write(json.dumps(record) + "\n")
    with open(out_dir / "selection_info.yaml", "w") as fh:
        import yaml
        yaml.safe_dump(sel_info, fh, sort_keys=False)
    last = result.metrics[-1] if result.metrics else {"loss_total": float("nan")}
    print(f"checkpoint written to {ckpt} (final loss {last['loss_total']:.5f})")
    return 0


def _scene_with_checkpoint(args):
    scene = sio.load_gaussian_scene(args.scene)
    field, selected = sio.load_field_checkpoint(args.checkpoint)
    mask = np.zeros(len(scene), dtype=bool)
    mask[selected] = True
    return scene.with_selection(mask), field


def _camera_from_args(args):
    pose_set = sio.load_pose_set(args.poses, check_files=False)
    if not 0 <= args.view < len(pose_set.frames):
        raise ConfigurationError(f"view {args.view} out of range "
                                 f"(pose file has {len(pose_set.frames)} frames)")
    cam = pose_set.frames[args.view].camera
    if args.width and args.height:
        cam = cam.scaled(args.width, args.height)
    return cam


def cmd_render(args) -> int:
    if args.mode == "rgb":
        scene = sio.load_gaussian_scene(args.scene)
        cam = _camera_from_args(args)
        image = render_rgb(scene, cam)
        sio.save_png_rgb(args.out, image)
    else:
        if args.checkpoint is None:
            raise ConfigurationError("feature rendering needs --checkpoint")
        scene, field = _scene_with_checkpoint(args)
        cam = _camera_from_args(args)
        fr = render_features(scene, field, cam, head=args.mode, cache_weights=False)
        sio.write_feature_container(args.out, fr.values.astype(np.float32),
                                    dtype=args.dtype)
    print(f"wrote {args.out}")
    return 0


def cmd_query(args) -> int:
    scene, field = _scene_with_checkpoint(args)
    cam = _camera_from_args(args)
    qs = _load_queries(args.queries, args.canonicals)
    fr = render_features(scene, field, cam, head="semantic", cache_weights=False)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for label, vec in qs.queries:
        rel = relevancy(fr.values, vec, qs.canonicals)
        safe = label.replace("/", "_").replace(" ", "_")
        sio.save_png_falsecolor(out_dir / f"{safe}.png", rel)
        sio.write_feature_container(out_dir / f"{safe}.fmfc", rel[..., None], "f32")
        print(f"{label}: max relevancy {rel.max():.4f}")
    return 0


def _interior_mask(gt_labels: np.ndarray, n_classes: int, erosion: int) -> np.ndarray:
    interior = np.zeros(gt_labels.shape, dtype=bool)
    for c in range(n_classes):
        m = gt_labels == c
        if erosion > 0:
            m = ndimage.binary_erosion(m, iterations=erosion, border_value=0)
        interior |= m
    return interior


def evaluate(scene, field, test_poses, query_set: QuerySet, boxes, masks, legend,
             class_entries, erosion: int = 2) -> dict:
    """Detection / segmentation / relevancy-ranking metrics over test views.

    ``legend`` maps mask label indices to names; class embeddings are looked
    up by those names so the embedding file order is free.
    """
    rendered = {}
    for view in sorted({v for v, _, _ in boxes} | set(masks.keys())):
        cam = test_poses.frames[view].camera
        rendered[view] = render_features(scene, field, cam, head="semantic",
                                         cache_weights=False).values

    queries = dict(query_set.queries)
    detections = []
    for view, label, box in boxes:
        if label not in queries:
            raise AnnotationError(f"box references unknown query label {label!r}")
        rel = relevancy(rendered[view], queries[label], query_set.canonicals)
        ok, argmax = detect(rel, box)
        detections.append({"view": view, "label": label, "success": bool(ok),
                           "argmax": list(argmax), "box": list(box)})
    accuracy = (sum(d["success"] for d in detections) / len(detections)
                if detections else float("nan"))

    by_label = dict(class_entries)
    missing = [lab for lab in legend if lab not in by_label]
    if missing:
        raise AnnotationError(f"legend labels without class embeddings: {missing}")
    class_labels = list(legend)
    class_embs = np.stack([by_label[lab] for lab in class_labels])
    region_classes = [i for i, lab in enumerate(class_labels) if lab != "background"]
    mious, interior_mious, aps, cosines = [], [], [], []
    for view, gt in masks.items():
        fmap = rendered[view]
        pred = segment(fmap, class_embs)
        mious.append(miou(pred, gt, n_classes=len(class_labels)))
        interior = _interior_mask(gt, len(class_labels), erosion)
        interior_mious.append(miou(pred, gt, n_classes=len(class_labels),
                                   valid_mask=interior))
        rel_stack = np.stack([relevancy(fmap, class_embs[c], query_set.canonicals)
                              for c in range(len(class_labels))])
        gt_stack = np.stack([gt == c for c in range(len(class_labels))])
        aps.append(map_score(rel_stack, gt_stack))
        unit = fmap / np.maximum(np.linalg.norm(fmap, axis=-1, keepdims=True), 1e-12)
        for c in region_classes:
            m = (gt == c) & interior
            if m.any():
                cosines.append(unit[m] @ class_embs[c])
    return {
        "detection_accuracy": accuracy,
        "n_queries": len(detections),
        "detections": detections,
        "miou": float(np.mean(mious)) if mious else float("nan"),
        "interior_miou": float(np.mean(interior_mious)) if interior_mious else float("nan"),
        "map": float(np.mean(aps)) if aps else float("nan"),
        "mean_interior_cosine": (float(np.concatenate(cosines).mean())
                                 if cosines else float("nan")),
    }


def cmd_eval(args) -> int:
    scene, field = _scene_with_checkpoint(args)
    test_poses = sio.load_pose_set(args.poses, check_files=False)
    qs = _load_queries(args.queries, args.canonicals)
    boxes = sio.read_box_annotations(args.boxes)
    legend = sio.read_legend(args.legend)
    masks_dir = Path(args.masks_dir)
    masks = {}
    for i in range(len(test_poses.frames)):
        path = masks_dir / f"test_{i:03d}.png"
        if path.exists():
            masks[i] = sio.read_label_mask(path)
    class_entries = sio.read_embedding_file(args.classes)
    report = evaluate(scene, field, test_poses, qs, boxes, masks, legend,
                      class_entries, erosion=args.interior_erosion)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return 0


# --------------------------------------------------------------------- main

def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="semsplat",
        description="semantic feature fields on Gaussian-splatting scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate the synthetic desk-scale fixture")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--regions", type=int, default=4)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--clip-dim", type=int, default=32)
    p.add_argument("--dino-dim", type=int, default=16)
    p.add_argument("--train-views", type=int, default=12)
    p.add_argument("--test-views", type=int, default=6)
    p.add_argument("--steps", type=int, default=2000)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="distill supervision into a feature field")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render RGB or a feature-map container")
    p.add_argument("--scene", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--mode", choices=("rgb", "semantic", "regularizer"), default="rgb")
    p.add_argument("--checkpoint")
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--dtype", choices=("f32", "f16"), default="f32")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("query", help="relevancy maps for open-vocabulary queries")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--queries", required=True)
    p.add_argument("--canonicals", required=True)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--out-dir", required=True)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="detection/segmentation metrics on annotations")
    p.add_argument("--scene", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--poses", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--canonicals", required=True)
    p.add_argument("--classes", required=True)
    p.add_argument("--boxes", required=True)
    p.add_argument("--masks-dir", required=True)
    p.add_argument("--legend", required=True)
    p.add_argument("--interior-erosion", type=int, default=2)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)
    return parser


_EXIT_CODES = (
    ((ConfigurationError, InvalidParameterError, UsageError, TrainingError), 2),
    ((FormatError, AnnotationError), 3),
    ((DivergenceError,), 4),
    ((OSError,), 5),
)


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single mapping point to exit codes
        for types, code in _EXIT_CODES:
            if isinstance(exc, types):
                print(f"error: {exc}", file=sys.stderr)
                return code
        raise


if __name__ == "__main__":
    sys.exit(main())
