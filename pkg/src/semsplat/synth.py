"""Deterministic synthetic desk-scale fixture.

Generates a scene of labeled flat regions on a background slab, supervision
feature maps that mimic a patch-pyramid vision-language extractor applied to
the ground-truth label image, plus box/mask annotations and query embedding
files. The fixture is a pure function of its parameters and seed; every output
byte is reproducible.

Geometry notes: regions sit slightly above the slab so that depth sorting is
exercised; each surface carries two opacity tiers so that the 40% opacity-
based Gaussian selection keeps a complete covering grid. Two of the four
regions are small and adjacent, which a coarse-only supervision pyramid
cannot tell apart; this is what the single-scale ablation check leans on.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import logit

import yaml

from . import io as sio
from .distill import normalize_pixels, select_gaussians
from .errors import ConfigurationError
from .query import CANONICAL_PHRASES
from .render import DEFAULT_SETTINGS, compute_blend_weights
from .scene import SH_C0, Camera, GaussianScene, look_at_camera


@dataclass
class SynthParams:
    seed: int = 7
    n_regions: int = 4                   # 2..4 labeled regions plus background
    width: int = 64
    height: int = 64
    clip_dim: int = 32
    dino_dim: int = 16
    n_train_views: int = 12
    n_test_views: int = 6
    focal: float = 64.0
    camera_height: float = 3.3
    # patch-pyramid scales for the synthetic supervision (fractions of image size)
    pyramid_scales: tuple = (0.05, 0.062, 0.08, 0.10, 0.13, 0.17, 0.22)
    pool_power: float = 3.0              # dominance weighting of patch pooling
    region_spacing: float = 0.065        # Gaussian grid pitch inside regions
    slab_spacing: float = 0.115
    filler_per_kept: float = 1.5         # low-opacity fillers per selected-tier Gaussian
    total_steps: int = 2000
    pixel_loss_start_step: int | None = None  # default: 60% of total_steps

    def __post_init__(self):
        if not 2 <= self.n_regions <= 4:
            raise ConfigurationError("fixture supports 2 to 4 regions")
        if sorted(self.pyramid_scales) != list(self.pyramid_scales):
            raise ConfigurationError("pyramid scales must be ascending")
        if self.pixel_loss_start_step is None:
            self.pixel_loss_start_step = int(round(0.6 * self.total_steps))


# Region layout in world units on the z=0 plane: two large squares and two
# small adjacent ones (the adjacency is load-bearing for the ablation check).
_REGION_RECTS = (
    (-1.30, -0.90, -0.30, 0.10),   # large, lower left
    (0.30, -0.90, 1.30, 0.10),     # large, lower right
    (-0.44, 0.37, -0.08, 0.73),    # small
    (0.02, 0.37, 0.38, 0.73),      # small, adjacent to the previous one
)
_SLAB_RECT = (-2.1, -1.95, 2.1, 1.95)  # covers the full image in every view
_REGION_Z = 0.06

_REGION_COLORS = ((0.85, 0.15, 0.15), (0.15, 0.7, 0.2),
                  (0.2, 0.3, 0.85), (0.85, 0.75, 0.15))
_SLAB_COLOR = (0.45, 0.45, 0.45)

_KEPT_OPACITY = 0.97
_FILLER_OPACITY = 0.5


def _grid_points(rect, spacing, rng, jitter=0.15):
    x0, y0, x1, y1 = rect
    nx = max(2, int(round((x1 - x0) / spacing)))
    ny = max(2, int(round((y1 - y0) / spacing)))
    xs = np.linspace(x0 + spacing / 2, x1 - spacing / 2, nx)
    ys = np.linspace(y0 + spacing / 2, y1 - spacing / 2, ny)
    pts = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    return pts + rng.uniform(-jitter * spacing, jitter * spacing, size=pts.shape)


def _orthonormal_targets(dim, count, rng):
    """First ``count`` columns of a random orthonormal basis."""
    if count > dim:
        raise ConfigurationError(f"need embedding dim >= {count}")
    mat = rng.standard_normal((dim, dim))
    q, _ = np.linalg.qr(mat)
    return q[:, :count].T.copy()


def _dc_from_color(color):
    return (np.asarray(color, dtype=np.float64) - 0.5) / SH_C0


def build_scene(params: SynthParams, rng) -> tuple[GaussianScene, np.ndarray]:
    """Scene plus the per-Gaussian region id (n_regions = background)."""
    surfaces = [(rect, _REGION_Z, _REGION_COLORS[i], params.region_spacing, i)
                for i, rect in enumerate(_REGION_RECTS[:params.n_regions])]
    surfaces.append((_SLAB_RECT, 0.0, _SLAB_COLOR, params.slab_spacing,
                     params.n_regions))

    means, colors, sigmas, opacities, region_ids = [], [], [], [], []
    for rect, z, color, spacing, region in surfaces:
        pts = _grid_points(rect, spacing, rng)
        sigma = 0.8 * spacing
        n_kept = pts.shape[0]
        # high-opacity covering tier (survives selection) ...
        means.append(np.column_stack([pts, np.full(n_kept, z)]))
        opacities.append(np.full(n_kept, _KEPT_OPACITY))
        # ... plus redundant low-opacity fillers
        n_fill = int(round(params.filler_per_kept * n_kept))
        fill = pts[rng.integers(n_kept, size=n_fill)] \
            + rng.uniform(-0.4 * spacing, 0.4 * spacing, size=(n_fill, 2))
        x0, y0, x1, y1 = rect
        fill = np.clip(fill, (x0, y0), (x1, y1))
        means.append(np.column_stack([fill, np.full(n_fill, z)]))
        opacities.append(np.full(n_fill, _FILLER_OPACITY))
        for n in (n_kept, n_fill):
            colors.append(np.tile(color, (n, 1)))
            sigmas.append(np.full(n, sigma))
            region_ids.append(np.full(n, region, dtype=np.int64))

    means = np.concatenate(means)
    colors = np.concatenate(colors)
    sigmas = np.concatenate(sigmas)
    opacities = np.concatenate(opacities)
    region_ids = np.concatenate(region_ids)

    n = means.shape[0]
    rotations = np.zeros((n, 4))
    rotations[:, 0] = 1.0
    log_scales = np.log(np.stack([sigmas, sigmas, sigmas * 0.3], axis=1))
    sh = np.zeros((n, 16, 3))
    sh[:, 0, :] = _dc_from_color(colors)
    scene = GaussianScene(means=means, rotations=rotations, log_scales=log_scales,
                          opacity_logits=logit(opacities), sh_coeffs=sh)
    return scene, region_ids


def build_cameras(params: SynthParams) -> tuple[list, list]:
    def ring(count, phase):
        cams = []
        for i in range(count):
            ang = 2 * math.pi * (i + phase) / count
            pos = (0.22 * math.sin(ang), 0.12 * math.cos(ang),
                   params.camera_height + 0.12 * math.sin(2 * ang))
            target = (0.05 * math.cos(ang), -0.03 + 0.04 * math.sin(ang), 0.0)
            cams.append(look_at_camera(pos, target, up=(0.0, 1.0, 0.0),
                                       fx=params.focal, fy=params.focal,
                                       width=params.width, height=params.height))
        return cams

    return ring(params.n_train_views, 0.0), ring(params.n_test_views, 0.37)


def render_label_map(scene: GaussianScene, region_ids: np.ndarray, cam: Camera,
                     n_regions: int, settings=DEFAULT_SETTINGS) -> np.ndarray:
    """Ground-truth label image from blending one-hot region indicators over
    the selected Gaussians; uncovered mass counts as background."""
    sel = np.flatnonzero(scene.selection_mask)
    weights = compute_blend_weights(scene, cam, sel, settings)
    onehot = np.zeros((sel.size, n_regions + 1))
    onehot[np.arange(sel.size), region_ids[sel]] = 1.0
    blended = (weights @ onehot).reshape(cam.height, cam.width, n_regions + 1)
    blended[..., n_regions] += 1.0 - blended.sum(axis=-1)
    return blended.argmax(axis=-1)


def patch_pyramid(dense: np.ndarray, fractions) -> list:
    """Per-scale feature maps mimicking a patch-based extractor.

    For each scale fraction the dense map is tiled with square patches
    (stride = half patch side, edges covered); each patch embedding is the
    normalized mean of its pixels, spread over the grid cells it covers with
    overlap averaging and a final per-cell normalization.
    """
    dense = np.asarray(dense, dtype=np.float64)
    h, w, d = dense.shape
    integral = np.zeros((h + 1, w + 1, d))
    integral[1:, 1:] = dense.cumsum(axis=0).cumsum(axis=1)

    def positions(extent, patch, stride):
        if patch >= extent:
            return [0]
        pos = list(range(0, extent - patch + 1, stride))
        if pos[-1] != extent - patch:
            pos.append(extent - patch)
        return pos

    levels = []
    for fraction in fractions:
        patch = max(2, int(round(fraction * max(w, h))))
        patch = min(patch, min(w, h))
        stride = max(1, patch // 2)
        gw = (w + stride - 1) // stride
        gh = (h + stride - 1) // stride
        acc = np.zeros((gh, gw, d))
        cnt = np.zeros((gh, gw, 1))
        for py in positions(h, patch, stride):
            for px in positions(w, patch, stride):
                s = (integral[py + patch, px + patch] - integral[py, px + patch]
                     - integral[py + patch, px] + integral[py, px])
                emb = s / max(np.linalg.norm(s), 1e-12)
                gy0, gy1 = py // stride, (py + patch - 1) // stride
                gx0, gx1 = px // stride, (px + patch - 1) // stride
                acc[gy0:gy1 + 1, gx0:gx1 + 1] += emb
                cnt[gy0:gy1 + 1, gx0:gx1 + 1] += 1.0
        level = normalize_pixels(acc / np.maximum(cnt, 1.0))
        levels.append((float(fraction), level))
    return levels


def label_patch_pyramid(labels: np.ndarray, targets: np.ndarray, fractions,
                        pool_power: float = 2.0) -> list:
    """Pyramid over a ground-truth label image with dominance-weighted pooling.

    A patch embedding mixes the class targets by label fraction raised to
    ``pool_power``; a patch mostly showing one class therefore lands close to
    that class's embedding (as a vision-language encoder would), while evenly
    mixed patches stay genuinely ambiguous. Tiling and overlap averaging match
    ``patch_pyramid``.
    """
    labels = np.asarray(labels)
    h, w = labels.shape
    n_classes = int(labels.max()) + 1
    targets = np.asarray(targets, dtype=np.float64)[:n_classes]
    onehot = np.zeros((h, w, n_classes))
    onehot[np.arange(h)[:, None], np.arange(w)[None, :], labels] = 1.0
    counts = np.zeros((h + 1, w + 1, n_classes))
    counts[1:, 1:] = onehot.cumsum(axis=0).cumsum(axis=1)

    def positions(extent, patch, stride):
        if patch >= extent:
            return [0]
        pos = list(range(0, extent - patch + 1, stride))
        if pos[-1] != extent - patch:
            pos.append(extent - patch)
        return pos

    d = targets.shape[1]
    levels = []
    for fraction in fractions:
        patch = max(2, int(round(fraction * max(w, h))))
        patch = min(patch, min(w, h))
        stride = max(1, patch // 2)
        gw = (w + stride - 1) // stride
        gh = (h + stride - 1) // stride
        acc = np.zeros((gh, gw, d))
        cnt = np.zeros((gh, gw, 1))
        area = float(patch * patch)
        for py in positions(h, patch, stride):
            for px in positions(w, patch, stride):
                c = (counts[py + patch, px + patch] - counts[py, px + patch]
                     - counts[py + patch, px] + counts[py, px]) / area
                mix = (c ** pool_power) @ targets
                emb = mix / max(np.linalg.norm(mix), 1e-12)
                gy0, gy1 = py // stride, (py + patch - 1) // stride
                gx0, gx1 = px // stride, (px + patch - 1) // stride
                acc[gy0:gy1 + 1, gx0:gx1 + 1] += emb
                cnt[gy0:gy1 + 1, gx0:gx1 + 1] += 1.0
        level = normalize_pixels(acc / np.maximum(cnt, 1.0))
        levels.append((float(fraction), level))
    return levels


@dataclass
class SynthFixture:
    out_dir: Path
    params: SynthParams
    region_labels: list
    scene_path: Path
    config_path: Path


def generate(out_dir, params: SynthParams = SynthParams()) -> SynthFixture:
    """Write the full fixture: scene, poses, supervision, annotations,
    embeddings and a ready-to-run training config."""
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    (out / "annotations" / "masks").mkdir(parents=True, exist_ok=True)
    (out / "embeddings").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(params.seed)
    scene, region_ids = build_scene(params, rng)
    train_cams, test_cams = build_cameras(params)

    k = params.n_regions
    clip_targets = _orthonormal_targets(params.clip_dim, k + 1 + len(CANONICAL_PHRASES), rng)
    region_clip, bg_clip = clip_targets[:k], clip_targets[k]
    canonicals = clip_targets[k + 1:]
    dino_targets = _orthonormal_targets(params.dino_dim, k + 1, rng)

    scene_path = out / "scene.ply"
    sio.save_gaussian_scene(scene_path, scene)

    mask, _ = select_gaussians(scene, train_cams)
    scene = scene.with_selection(mask)

    region_labels = [f"region_{i}" for i in range(k)]
    all_clip = np.vstack([region_clip, bg_clip[None]])
    all_dino = dino_targets

    train_frames = []
    for i, cam in enumerate(train_cams):
        labels = render_label_map(scene, region_ids, cam, k)
        dino_map = all_dino[labels]
        pyramid = label_patch_pyramid(labels, all_clip, params.pyramid_scales,
                                      pool_power=params.pool_power)
        finest = pyramid[0][1]
        clip_name = f"features/clip_{i:03d}.fmfc"
        dino_name = f"features/dino_{i:03d}.fmfc"
        sio.write_feature_container(out / clip_name, finest, "f32", pyramid=pyramid)
        sio.write_feature_container(out / dino_name, dino_map, "f32")
        train_frames.append(sio.PoseFrame(camera=cam, clip_features=clip_name,
                                          dino_features=dino_name))
    sio.save_pose_set(out / "poses_train.yaml", sio.PoseSet(train_frames, "world_to_camera_z_forward"))

    boxes = []
    for i, cam in enumerate(test_cams):
        labels = render_label_map(scene, region_ids, cam, k)
        sio.write_label_mask(out / "annotations" / "masks" / f"test_{i:03d}.png", labels)
        for r in range(k):
            ys, xs = np.nonzero(labels == r)
            if ys.size == 0:
                continue
            boxes.append((i, region_labels[r],
                          (int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()))))
    sio.write_box_annotations(out / "annotations" / "boxes.txt", boxes)
    sio.write_legend(out / "annotations" / "legend.txt", region_labels + ["background"])
    sio.save_pose_set(out / "poses_test.yaml",
                      sio.PoseSet([sio.PoseFrame(camera=c) for c in test_cams],
                                  "world_to_camera_z_forward"))

    sio.write_embedding_file(out / "embeddings" / "queries.emb",
                             list(zip(region_labels, region_clip)))
    sio.write_embedding_file(out / "embeddings" / "canonicals.emb",
                             list(zip(CANONICAL_PHRASES, canonicals)))
    sio.write_embedding_file(out / "embeddings" / "classes.emb",
                             list(zip(region_labels, region_clip)) + [("background", bg_clip)])

    config = {
        "seed": int(params.seed),
        "scene": "scene.ply",
        "poses": "poses_train.yaml",
        "output_dir": "run",
        "field": {
            "levels": 6,
            "table_size": 2 ** 14,
            "feat_dim": 4,
            "n_min": 16,
            "n_max": 256,
            "aux_dim": 0,
            "bounds": "auto",
            "clip_dim": int(params.clip_dim),
            "dino_dim": int(params.dino_dim),
            "hidden_width": 64,
            "hidden_layers": 2,
            "field_type": "mhe",
        },
        "train": {
            "lambda": 0.2,
            "gamma": 0.01,
            "delta": 1.25,
            "kernel": 3,
            "total_steps": int(params.total_steps),
            "pixel_loss_start_step": int(params.pixel_loss_start_step),
            "lr_init": 5.0e-3,
            "lr_final": 4.0e-3,
            "weight_decay": 1.0e-9,
            "clip_target_mode": "hybrid",
        },
        "selection": {
            "min_radius_px": 2.0,
            "target_fraction": 0.4,
        },
        "render": {
            "feature_width": int(params.width),
            "feature_height": int(params.height),
        },
    }
    config_path = out / "train_config.yaml"
    sio.save_run_config(config_path, config,
                        header="synthetic desk-scale fixture; paths are relative to this file")

    info = {
        "regions": region_labels,
        "region_rects": [list(r) for r in _REGION_RECTS[:k]],
        "seed": int(params.seed),
        "n_gaussians": len(scene),
    }
    with open(out / "fixture_info.yaml", "w") as fh:
        yaml.safe_dump(info, fh, sort_keys=False)

    return SynthFixture(out_dir=out, params=params, region_labels=region_labels,
                        scene_path=scene_path, config_path=config_path)
