"""Distillation of vision-language feature maps into the 3D field.

Supervision targets are hybrid feature maps (per-pixel mean of a multi-scale
pyramid, re-normalized) plus a dense regularizer map. The objective combines
an elementwise Huber loss on the semantic map, a mean-squared loss on the
regularizer map and, after a warmup phase, a pixel-alignment loss that makes
neighborhood dot-product patterns of the semantic map match those of the
regularizer map (gradients stopped on the regularizer side).

Geometry stays frozen throughout, so the per-view blend-weight matrices and
the hash-grid interpolation geometry are computed once and reused every step.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import (ConfigurationError, DivergenceError, FormatError,
                     TrainingError)
from .render import DEFAULT_SETTINGS, RasterSettings, _project_arrays, compute_blend_weights
from .scene import Camera, GaussianScene, assemble_covariance

_PIXEL_NORM_GUARD = 1e-8


@dataclass
class SupervisionPair:
    """One training view: camera plus its semantic and regularizer targets.

    ``clip_pyramid`` optionally keeps the per-scale maps the hybrid target was
    built from; the single-scale and scale-conditioned ablations need them.
    """

    camera: Camera
    clip_target: np.ndarray    # (H, W, D_clip), unit rows
    dino_target: np.ndarray    # (H, W, D_dino)
    clip_pyramid: Optional[list] = None  # [(scale_fraction, (h, w, D_clip))]

    def __post_init__(self):
        self.clip_target = np.asarray(self.clip_target, dtype=np.float64)
        self.dino_target = np.asarray(self.dino_target, dtype=np.float64)
        ch, cw = self.clip_target.shape[:2]
        if self.dino_target.shape[:2] != (ch, cw):
            raise ConfigurationError("clip and dino targets must share resolution")
        if (self.camera.height, self.camera.width) != (ch, cw):
            raise ConfigurationError("camera resolution must match the targets")
        norms = np.linalg.norm(self.clip_target, axis=-1)
        covered = norms > 0
        if covered.any() and np.abs(norms[covered] - 1.0).max() > 1e-3:
            raise ConfigurationError("clip target pixels must be unit norm (within 1e-3)")


@dataclass
class TrainConfig:
    """Hyperparameters of the distillation run; defaults follow the method."""

    lam: float = 0.2                    # CLIP/DINO balance
    gamma: float = 0.01                 # pixel-alignment weight
    delta: float = 1.25                 # Huber threshold
    kernel: int = 3                     # pixel-loss patch side
    total_steps: int = 4200
    pixel_loss_start_step: int = 2500
    lr_init: float = 5e-3
    lr_final: float = 4e-3
    weight_decay: float = 1e-9
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    seed: int = 0
    # ablation switches
    clip_target_mode: str = "hybrid"    # "hybrid" | "single" | "lerf"
    single_scale_index: Optional[int] = None  # default: coarsest level

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigurationError("lambda must lie in [0, 1]")
        if self.gamma < 0.0:
            raise ConfigurationError("gamma must be non-negative")
        if self.kernel < 3 or self.kernel % 2 == 0:
            raise ConfigurationError("kernel must be odd and at least 3")
        if self.pixel_loss_start_step > self.total_steps:
            raise ConfigurationError("pixel_loss_start_step must not exceed total_steps")
        if self.clip_target_mode not in ("hybrid", "single", "lerf"):
            raise ConfigurationError(f"unknown clip_target_mode {self.clip_target_mode!r}")


# --------------------------------------------------------------- resampling

def bilinear_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Separable bilinear resize with corner alignment (source corners map to
    destination corners; a 1x1 source broadcasts)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()

    def coords(n_src, n_dst):
        if n_src == 1 or n_dst == 1:
            return np.zeros(n_dst)
        return np.linspace(0.0, n_src - 1.0, n_dst)

    ys = coords(h, out_h)
    y0 = np.floor(ys).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    fy = (ys - y0)[:, None, None]
    rows = img[y0] * (1.0 - fy) + img[y1] * fy

    xs = coords(w, out_w)
    x0 = np.floor(xs).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    fx = (xs - x0)[None, :, None]
    return rows[:, x0] * (1.0 - fx) + rows[:, x1] * fx


def normalize_pixels(fmap: np.ndarray) -> np.ndarray:
    """Per-pixel unit normalization; all-zero pixels stay zero."""
    norms = np.linalg.norm(fmap, axis=-1, keepdims=True)
    return np.where(norms > _PIXEL_NORM_GUARD, fmap / np.maximum(norms, _PIXEL_NORM_GUARD), 0.0)


def build_hybrid_clip(pyramid: list) -> np.ndarray:
    """Average a multi-scale pyramid into one supervision map.

    ``pyramid`` holds (scale_fraction, map) pairs. Every level is bilinearly
    upsampled to the finest level's grid, the levels are averaged per pixel
    and the result is re-normalized to unit vectors.
    """
    if not pyramid:
        raise FormatError("pyramid must contain at least one level")
    dims = {np.asarray(m).shape[-1] for _, m in pyramid}
    if len(dims) != 1:
        raise FormatError(f"pyramid levels disagree on feature dim: {sorted(dims)}")
    target = max(pyramid, key=lambda lv: np.asarray(lv[1]).shape[0] * np.asarray(lv[1]).shape[1])[1]
    th, tw = np.asarray(target).shape[:2]
    acc = np.zeros((th, tw, next(iter(dims))))
    for _, level in pyramid:
        acc += bilinear_resize(np.asarray(level, dtype=np.float64), th, tw)
    return normalize_pixels(acc / len(pyramid))


def single_scale_target(pyramid: list, index: Optional[int] = None) -> np.ndarray:
    """Ablation target: one pyramid level upsampled to the finest grid and
    re-normalized. Default level is the coarsest (largest scale fraction)."""
    if not pyramid:
        raise FormatError("pyramid must contain at least one level")
    ordered = sorted(range(len(pyramid)), key=lambda i: pyramid[i][0])
    pick = ordered[-1] if index is None else index
    if not 0 <= pick < len(pyramid):
        raise ConfigurationError(f"single_scale_index {pick} out of range")
    target = max(pyramid, key=lambda lv: np.asarray(lv[1]).shape[0] * np.asarray(lv[1]).shape[1])[1]
    th, tw = np.asarray(target).shape[:2]
    return normalize_pixels(bilinear_resize(np.asarray(pyramid[pick][1], dtype=np.float64), th, tw))


# -------------------------------------------------------------------- losses

def clip_loss(rendered: np.ndarray, target: np.ndarray, delta: float) -> float:
    """Elementwise Huber loss, mean reduction over all elements."""
    return _clip_loss_grad(rendered, target, delta)[0]


def _clip_loss_grad(rendered, target, delta):
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ConfigurationError("rendered/target shape mismatch")
    d = rendered - target
    absd = np.abs(d)
    quad = absd < delta
    vals = np.where(quad, 0.5 * d * d, delta * (absd - 0.5 * delta))
    grad = np.where(quad, d, delta * np.sign(d)) / d.size
    return float(vals.mean()), grad


def dino_loss(rendered: np.ndarray, target: np.ndarray) -> float:
    """Mean squared difference over all elements."""
    return _dino_loss_grad(rendered, target)[0]


def _dino_loss_grad(rendered, target):
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ConfigurationError("rendered/target shape mismatch")
    d = rendered - target
    return float(np.mean(d * d)), 2.0 * d / d.size


def _kernel_offsets(kernel: int):
    r = kernel // 2
    return [(dy, dx) for dy in range(-r, r + 1) for dx in range(-r, r + 1)
            if (dy, dx) != (0, 0)]


def _shifted_slices(h, w, dy, dx):
    """Index windows so that a[src] pairs pixel i with pixel i+(dy,dx)."""
    ys = slice(max(0, -dy), min(h, h - dy))
    xs = slice(max(0, -dx), min(w, w - dx))
    yn = slice(max(0, dy), min(h, h + dy))
    xn = slice(max(0, dx), min(w, w + dx))
    return (ys, xs), (yn, xn)


def pixel_alignment_loss(rendered_clip: np.ndarray, rendered_dino: np.ndarray,
                         kernel: int = 3) -> float:
    """Neighborhood dot-product alignment between the two rendered maps.

    Both maps are unit-normalized per pixel; for each pixel and each neighbor
    in the K x K kernel the absolute difference of the two dot products is
    accumulated. Border pixels use their valid neighbors with matching count
    normalization. Gradients (in training) flow into the semantic branch only.
    """
    return _pixel_alignment_grad(rendered_clip, rendered_dino, kernel)[0]


def _pixel_alignment_grad(rendered_clip, rendered_dino, kernel):
    if kernel < 3 or kernel % 2 == 0:
        raise ConfigurationError("kernel must be odd and at least 3")
    F = np.asarray(rendered_clip, dtype=np.float64)
    D = np.asarray(rendered_dino, dtype=np.float64)
    if F.shape[:2] != D.shape[:2]:
        raise ConfigurationError("rendered maps must share resolution")
    h, w = F.shape[:2]

    f_norm = np.linalg.norm(F, axis=-1)
    f_denom = np.maximum(f_norm, _PIXEL_NORM_GUARD)
    f = F / f_denom[..., None]
    d_norm = np.linalg.norm(D, axis=-1)
    d = D / np.maximum(d_norm, _PIXEL_NORM_GUARD)[..., None]

    offsets = _kernel_offsets(kernel)
    counts = np.zeros((h, w))
    accum = np.zeros((h, w))
    diffs = []
    for dy, dx in offsets:
        src, nbr = _shifted_slices(h, w, dy, dx)
        sf = np.einsum("yxc,yxc->yx", f[src], f[nbr])
        sd = np.einsum("yxc,yxc->yx", d[src], d[nbr])
        diff = sd - sf
        accum[src] += np.abs(diff)
        counts[src] += 1.0
        diffs.append(diff)

    n_pixels = h * w
    per_pixel = np.divide(accum, counts, out=np.zeros_like(accum), where=counts > 0)
    value = float(per_pixel.sum() / n_pixels)

    # d value / d sf[i, o] = -sign(sd - sf) / (n_pixels * counts[i])
    g_unit = np.zeros_like(f)
    inv_counts = np.divide(1.0, counts, out=np.zeros_like(counts), where=counts > 0)
    for (dy, dx), diff in zip(offsets, diffs):
        src, nbr = _shifted_slices(h, w, dy, dx)
        coef = (-np.sign(diff) * inv_counts[src] / n_pixels)[..., None]
        g_unit[src] += coef * f[nbr]
        g_unit[nbr] += coef * f[src]

    # chain through per-pixel normalization of F
    proj = np.einsum("yxc,yxc->yx", g_unit, F)[..., None]
    grad_F = g_unit / f_denom[..., None]
    over = f_norm > _PIXEL_NORM_GUARD
    grad_F[over] -= (F[over] * proj[over]
                     / (f_denom[over, None] ** 2 * f_norm[over, None]))
    return value, grad_F


def total_loss(clip_value: float, dino_value: float, pixel_value: float,
               step: int, config: TrainConfig) -> float:
    """lambda * L_clip + (1 - lambda) * L_dino + gamma * L_pixel, with the
    pixel term forced off before its start step."""
    gamma = config.gamma if step >= config.pixel_loss_start_step else 0.0
    return (config.lam * clip_value + (1.0 - config.lam) * dino_value
            + gamma * pixel_value)


def learning_rate(step: int, config: TrainConfig) -> float:
    """Exponential decay hitting lr_init at step 0 and lr_final at the last step."""
    if config.total_steps <= 1:
        return config.lr_init
    t = min(max(step, 0), config.total_steps - 1) / (config.total_steps - 1)
    return float(config.lr_init * (config.lr_final / config.lr_init) ** t)


# ----------------------------------------------------------------- selection

def select_gaussians(scene: GaussianScene, cameras: list,
                     min_radius_px: float = 2.0,
                     target_fraction: float = 0.40,
                     fraction_band: tuple = (0.35, 0.45),
                     settings: RasterSettings = DEFAULT_SETTINGS):
    """Choose the Gaussians that participate in semantic rendering.

    A Gaussian is eligible if its projected 3-sigma radius exceeds
    ``min_radius_px`` in at least one training view; among eligible ones the
    most opaque are kept, tuning the opacity cut so the selected fraction of
    the whole scene lands in ``fraction_band`` when feasible (nearest
    achievable otherwise). Returns (mask, info).
    """
    n = len(scene)
    covs = assemble_covariance(scene.rotations, scene.scales)
    best_radius = np.full(n, -np.inf)
    for cam in cameras:
        kept, _, _, _, radius = _project_arrays(scene.means, covs, cam, settings)
        np.maximum.at(best_radius, kept, radius)
    eligible = best_radius > min_radius_px
    if not eligible.any():
        raise TrainingError(
            "no Gaussian projects larger than "
            f"{min_radius_px} px in any training view; cannot train semantics")

    # Candidate thresholds are the distinct opacities of eligible Gaussians;
    # the selected set is a pure threshold cut (ties are never split). Pick
    # the achievable fraction inside the band closest to the target, or the
    # nearest achievable non-empty fraction if the band cannot be hit.
    opac = scene.opacities
    values, per_value = np.unique(opac[eligible], return_counts=True)
    cand = values[::-1]
    counts = np.cumsum(per_value[::-1])  # eligible Gaussians with opacity >= cand[i]
    fractions = counts / n

    def band_distance(f):
        if fraction_band[0] <= f <= fraction_band[1]:
            return 0.0
        return min(abs(f - fraction_band[0]), abs(f - fraction_band[1]))

    in_band = [i for i, f in enumerate(fractions) if band_distance(f) == 0.0]
    if in_band:
        pick = min(in_band, key=lambda i: abs(fractions[i] - target_fraction))
    else:
        pick = min(range(len(cand)),
                   key=lambda i: (band_distance(fractions[i]),
                                  abs(fractions[i] - target_fraction)))
    tau = cand[pick]
    mask = eligible & (opac >= tau)
    k = int(mask.sum())
    info = {
        "selected": k,
        "total": int(n),
        "fraction": k / n,
        "eligible": int(eligible.sum()),
        "opacity_threshold": float(tau),
        "note": f"selected {k}/{n} Gaussians ({k / n:.1%}) with opacity >= {tau:.4f}; "
                f"{int(eligible.sum())} eligible by radius > {min_radius_px} px",
    }
    return mask, info


# ----------------------------------------------------------------- optimizer

class RAdam:
    """Rectified adaptive-moment estimation with L2 weight decay.

    Follows the original variance-rectification rule: the adaptive step is
    used once the SMA length rho_t exceeds 4, plain bias-corrected momentum
    before that. Updates are applied in place.
    """

    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-15,
                 weight_decay=0.0):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.rho_inf = 2.0 / (1.0 - beta2) - 1.0

    def step(self, grads: dict, lr: float):
        self.t += 1
        t = self.t
        bias1 = 1.0 - self.beta1 ** t
        bias2 = 1.0 - self.beta2 ** t
        rho_t = self.rho_inf - 2.0 * t * self.beta2 ** t / bias2
        rectified = rho_t > 4.0
        if rectified:
            rect = np.sqrt((rho_t - 4.0) * (rho_t - 2.0) * self.rho_inf
                           / ((self.rho_inf - 4.0) * (self.rho_inf - 2.0) * rho_t))
        for name, p in self.params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            m_hat = m / bias1
            if rectified:
                p -= lr * rect * m_hat / (np.sqrt(v / bias2) + self.eps)
            else:
                p -= lr * m_hat


# ------------------------------------------------------------------ training

@dataclass
class TrainResult:
    field: object
    metrics: list
    selection_info: Optional[dict] = None


def _prepare_clip_targets(pairs, config: TrainConfig):
    """Resolve the per-view semantic target(s) for the configured mode."""
    if config.clip_target_mode == "hybrid":
        return [pair.clip_target for pair in pairs], None
    for pair in pairs:
        if not pair.clip_pyramid:
            raise ConfigurationError(
                f"clip_target_mode={config.clip_target_mode!r} needs per-scale pyramids")
    if config.clip_target_mode == "single":
        return [single_scale_target(pair.clip_pyramid, config.single_scale_index)
                for pair in pairs], None
    # scale-conditioned supervision: one target per pyramid level
    per_level = []
    fractions = sorted(frac for frac, _ in pairs[0].clip_pyramid)
    for pair in pairs:
        ordered = sorted(pair.clip_pyramid, key=lambda lv: lv[0])
        if [frac for frac, _ in ordered] != fractions:
            raise ConfigurationError("all views must share the same pyramid scales")
        th, tw = pair.clip_target.shape[:2]
        per_level.append([normalize_pixels(bilinear_resize(np.asarray(m, dtype=np.float64), th, tw))
                          for _, m in ordered])
    return per_level, fractions


def train(scene: GaussianScene, field, pairs: list, config: TrainConfig,
          settings: RasterSettings = DEFAULT_SETTINGS) -> TrainResult:
    """Distill the supervision pairs into the field.

    One step: sample a view, render both heads over the selected Gaussians,
    evaluate the combined objective and push gradients back through blending,
    heads and hash tables. Deterministic given ``config.seed``.
    """
    if not pairs:
        raise TrainingError("training requires at least one supervision pair")
    sel = np.flatnonzero(scene.selection_mask)
    if sel.size == 0:
        raise TrainingError("selection mask is empty; run select_gaussians first")

    positions = scene.means[sel]
    enc_cache = field.make_cache(positions) if hasattr(field, "make_cache") else None
    weight_mats = [compute_blend_weights(scene, pair.camera, sel, settings)
                   for pair in pairs]
    clip_targets, lerf_fractions = _prepare_clip_targets(pairs, config)
    uses_aux = config.clip_target_mode == "lerf"
    if uses_aux and getattr(field.config, "aux_dim", 0) != 1:
        raise ConfigurationError("scale-conditioned training needs aux_dim=1")

    params = field.parameters()
    opt = RAdam(params, beta1=config.beta1, beta2=config.beta2, eps=config.eps,
                weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    metrics = []
    t0 = time.perf_counter()

    for step in range(config.total_steps):
        lr = learning_rate(step, config)
        view = int(rng.integers(len(pairs)))
        pair = pairs[view]
        h, w = pair.clip_target.shape[:2]
        weights = weight_mats[view]

        if uses_aux:
            level = int(rng.integers(len(lerf_fractions)))
            aux = np.array([lerf_fractions[level]])
            clip_target = clip_targets[view][level]
        else:
            aux = None
            clip_target = clip_targets[view]

        fwd = field.forward_gaussians(positions, sel, aux=aux, cache=enc_cache)
        f_map = (weights @ fwd.semantic).reshape(h, w, -1)
        d_map = (weights @ fwd.regularizer).reshape(h, w, -1)

        lc, d_f = _clip_loss_grad(f_map, clip_target, config.delta)
        ld, d_d = _dino_loss_grad(d_map, pair.dino_target)
        pixel_active = config.gamma > 0.0 and step >= config.pixel_loss_start_step
        if pixel_active:
            lp, d_f_pixel = _pixel_alignment_grad(f_map, d_map, config.kernel)
        else:
            lp = 0.0
        loss = total_loss(lc, ld, lp, step, config)
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss} at step {step}")

        grad_f = config.lam * d_f
        if pixel_active:
            grad_f = grad_f + config.gamma * d_f_pixel
        grad_d = (1.0 - config.lam) * d_d

        d_sem = weights.T @ grad_f.reshape(h * w, -1)
        d_reg = weights.T @ grad_d.reshape(h * w, -1)
        grads = field.backward(fwd, d_sem, d_reg)
        opt.step(grads.by_name, lr)

        metrics.append({
            "step": step,
            "loss_total": loss,
            "loss_clip": lc,
            "loss_dino": ld,
            "loss_pixel": lp,
            "lr": lr,
            "wall_time": time.perf_counter() - t0,
        })

    return TrainResult(field=field, metrics=metrics)
