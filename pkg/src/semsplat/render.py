"""Point-splatting rasterizer: EWA projection, depth sorting and front-to-back
alpha blending of colors and features.

Geometry is frozen in this library, so per-pixel blend weights are constants
with respect to everything we train. The tiled rasterizer therefore collects
the weights into a sparse (pixels x gaussians) matrix once per camera;
rendering is then a sparse matmul against per-Gaussian values and the feature
backward pass is exactly the transposed matmul.

A naive global-sort per-pixel path (`*_reference`) evaluates the blending
formula directly and is kept as the oracle for the tiled path.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .errors import ConfigurationError, UsageError
from .scene import Camera, Gaussian, GaussianScene, assemble_covariance, eval_sh_colors

_EIG_FLOOR = 1e-12


@dataclass(frozen=True)
class RasterSettings:
    """Numerical knobs of the rasterizer; defaults follow reference GS.

    ``support_sigma`` truncates each splat to its 3-sigma ellipse. The cutoff
    is part of the blending definition (applied in the tiled and the naive
    path alike), so tile assignment by the 3-sigma bounding rectangle loses
    nothing and the two paths agree exactly.
    """

    near_plane: float = 0.01
    dilation: float = 0.3          # px^2 added to the 2D covariance diagonal
    tile_size: int = 16
    alpha_cap: float = 0.99        # keeps transmittance nonzero behind opaque splats
    alpha_cutoff: float = 1.0 / 255.0
    transmittance_floor: float = 1e-4
    support_sigma: float = 3.0


DEFAULT_SETTINGS = RasterSettings()


@dataclass
class ProjectedGaussian:
    mean2d: np.ndarray      # pixels
    cov2d: np.ndarray       # 2x2, pixels^2, dilation included
    depth: float            # camera-frame z
    source_index: int

    @property
    def radius(self) -> float:
        """3-sigma radius in pixels from the largest cov2d eigenvalue."""
        a, b, c = self.cov2d[0, 0], self.cov2d[0, 1], self.cov2d[1, 1]
        lam = 0.5 * (a + c) + np.sqrt(max(0.25 * (a - c) ** 2 + b * b, 0.0))
        return float(3.0 * np.sqrt(max(lam, _EIG_FLOOR)))


def _project_arrays(means, covariances, cam: Camera, settings: RasterSettings):
    """Vectorized projection with culling.

    Returns (kept_positions_into_input, mean2d, cov2d_abc, depth, radius)
    where cov2d_abc stacks the (a, b, c) entries of [[a, b], [b, c]].
    """
    pts = cam.world_to_camera_points(means)
    depth = pts[:, 2]
    keep = depth > settings.near_plane
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        empty = np.empty((0,))
        return idx, np.empty((0, 2)), np.empty((0, 3)), empty, empty

    pts = pts[idx]
    z = pts[:, 2]
    mean2d = np.stack([cam.fx * pts[:, 0] / z + cam.cx,
                       cam.fy * pts[:, 1] / z + cam.cy], axis=1)

    # J W Sigma W^T J^T with J the 2x3 perspective Jacobian at the mean.
    jac = np.zeros((idx.size, 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * pts[:, 0] / (z * z)
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * pts[:, 1] / (z * z)
    jw = jac @ cam.rotation
    cov2d = jw @ covariances[idx] @ np.swapaxes(jw, 1, 2)
    a = cov2d[:, 0, 0] + settings.dilation
    b = 0.5 * (cov2d[:, 0, 1] + cov2d[:, 1, 0])
    c = cov2d[:, 1, 1] + settings.dilation

    lam_max = 0.5 * (a + c) + np.sqrt(np.maximum(0.25 * (a - c) ** 2 + b * b, 0.0))
    radius = settings.support_sigma * np.sqrt(np.maximum(lam_max, _EIG_FLOOR))

    inside = ((mean2d[:, 0] + radius > 0.0) & (mean2d[:, 0] - radius < cam.width)
              & (mean2d[:, 1] + radius > 0.0) & (mean2d[:, 1] - radius < cam.height))
    sub = np.flatnonzero(inside)
    return (idx[sub], mean2d[sub], np.stack([a, b, c], axis=1)[sub],
            depth[idx][sub], radius[sub])


def project_gaussian(g: Gaussian, cam: Camera,
                     settings: RasterSettings = DEFAULT_SETTINGS,
                     source_index: int = 0) -> Optional[ProjectedGaussian]:
    """Project one Gaussian; returns None when culled (behind the near plane
    or with its 3-sigma footprint entirely off-screen)."""
    idx, mean2d, abc, depth, _ = _project_arrays(
        np.asarray(g.mean, dtype=np.float64)[None], g.covariance()[None], cam, settings)
    if idx.size == 0:
        return None
    a, b, c = abc[0]
    return ProjectedGaussian(mean2d=mean2d[0],
                             cov2d=np.array([[a, b], [b, c]]),
                             depth=float(depth[0]),
                             source_index=source_index)


def sort_by_depth(projected: list) -> list:
    """Front-to-back ordering: ascending depth, ties by source_index."""
    return sorted(projected, key=lambda p: (p.depth, p.source_index))


def _depth_order(depth, source_index):
    # lexsort sorts by the last key first
    return np.lexsort((source_index, depth))


def _alpha_rows(mean2d, abc, opacity, px, py, settings: RasterSettings):
    """Alpha of each (gaussian, pixel) pair; zeros where below the cutoff."""
    det = abc[:, 0] * abc[:, 2] - abc[:, 1] ** 2
    det = np.maximum(det, _EIG_FLOOR)
    i_a = abc[:, 2] / det
    i_b = -abc[:, 1] / det
    i_c = abc[:, 0] / det
    dx = px[None, :] - mean2d[:, 0, None]
    dy = py[None, :] - mean2d[:, 1, None]
    power = -0.5 * (i_a[:, None] * dx * dx + 2.0 * i_b[:, None] * dx * dy
                    + i_c[:, None] * dy * dy)
    alpha = opacity[:, None] * np.exp(np.minimum(power, 0.0))
    alpha = np.minimum(alpha, settings.alpha_cap)
    alpha[power < -0.5 * settings.support_sigma ** 2] = 0.0
    alpha[alpha < settings.alpha_cutoff] = 0.0
    return alpha


def _weights_from_alpha(alpha, settings: RasterSettings):
    """Blend weights alpha_i * prod_{j<i}(1 - alpha_j) with early termination:
    a contribution is dropped once incoming transmittance falls below the
    floor (transmittance is monotone, so the mask is exact)."""
    trans_after = np.cumprod(1.0 - alpha, axis=0)
    trans_before = np.vstack([np.ones((1, alpha.shape[1])), trans_after[:-1]])
    return alpha * trans_before * (trans_before >= settings.transmittance_floor)


def _collect_weights(mean2d, abc, depth, opacity, source_order_key, radius,
                     width, height, settings: RasterSettings):
    """Tiled traversal producing sparse weight entries.

    Returns (pixel_rows, gaussian_cols, weights) with gaussian_cols indexing
    the input arrays. Gaussians are bucketed into tiles by their 3-sigma
    bounding rectangle; each tile blends its bucket front to back.
    """
    n = mean2d.shape[0]
    rows_out, cols_out, vals_out = [], [], []
    if n == 0:
        return (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), np.empty(0))

    ts = settings.tile_size
    n_tx = (width + ts - 1) // ts
    n_ty = (height + ts - 1) // ts

    tx0 = np.clip(((mean2d[:, 0] - radius) // ts).astype(int), 0, n_tx - 1)
    tx1 = np.clip(((mean2d[:, 0] + radius) // ts).astype(int), 0, n_tx - 1)
    ty0 = np.clip(((mean2d[:, 1] - radius) // ts).astype(int), 0, n_ty - 1)
    ty1 = np.clip(((mean2d[:, 1] + radius) // ts).astype(int), 0, n_ty - 1)

    buckets: dict[tuple[int, int], list[int]] = {}
    for g in range(n):
        for ty in range(ty0[g], ty1[g] + 1):
            for tx in range(tx0[g], tx1[g] + 1):
                buckets.setdefault((ty, tx), []).append(g)

    for (ty, tx), bucket in buckets.items():
        bucket = np.asarray(bucket, dtype=np.int64)
        order = _depth_order(depth[bucket], source_order_key[bucket])
        bucket = bucket[order]

        x_lo, x_hi = tx * ts, min((tx + 1) * ts, width)
        y_lo, y_hi = ty * ts, min((ty + 1) * ts, height)
        xs = np.arange(x_lo, x_hi) + 0.5
        ys = np.arange(y_lo, y_hi) + 0.5
        px = np.tile(xs, y_hi - y_lo)
        py = np.repeat(ys, x_hi - x_lo)
        pixel_ids = (np.repeat(np.arange(y_lo, y_hi), x_hi - x_lo) * width
                     + np.tile(np.arange(x_lo, x_hi), y_hi - y_lo))

        alpha = _alpha_rows(mean2d[bucket], abc[bucket], opacity[bucket], px, py, settings)
        weights = _weights_from_alpha(alpha, settings)
        gi, pi = np.nonzero(weights)
        rows_out.append(pixel_ids[pi])
        cols_out.append(bucket[gi])
        vals_out.append(weights[gi, pi])

    return (np.concatenate(rows_out), np.concatenate(cols_out), np.concatenate(vals_out))


def compute_blend_weights(scene: GaussianScene, cam: Camera,
                          indices: Optional[np.ndarray] = None,
                          settings: RasterSettings = DEFAULT_SETTINGS,
                          reference: bool = False) -> sp.csr_matrix:
    """Per-pixel blend weights over the given Gaussians as a sparse matrix of
    shape (height * width, len(indices)).

    ``indices`` restricts blending to a subset of the scene (the transmittance
    product runs over that subset only); defaults to all Gaussians. With
    ``reference=True`` the naive global-sort path is used instead of tiling.
    """
    if indices is None:
        indices = np.arange(len(scene))
    indices = np.asarray(indices, dtype=np.int64)
    covs = assemble_covariance(scene.rotations[indices], scene.scales[indices])
    kept, mean2d, abc, depth, radius = _project_arrays(
        scene.means[indices], covs, cam, settings)
    opacity = scene.opacities[indices][kept]
    source_key = indices[kept]

    if reference:
        rows, cols, vals = _collect_weights_reference(
            mean2d, abc, depth, opacity, source_key, cam.width, cam.height, settings)
    else:
        rows, cols, vals = _collect_weights(
            mean2d, abc, depth, opacity, source_key, radius,
            cam.width, cam.height, settings)
    cols = kept[cols]  # back into `indices` positions
    mat = sp.csr_matrix((vals, (rows, cols)),
                        shape=(cam.height * cam.width, indices.size))
    return mat


def _collect_weights_reference(mean2d, abc, depth, opacity, source_order_key,
                               width, height, settings: RasterSettings):
    """Oracle path: one global depth sort, then the blending formula evaluated
    per pixel over every Gaussian."""
    order = _depth_order(depth, source_order_key)
    mean2d, abc, opacity = mean2d[order], abc[order], opacity[order]
    rows_out, cols_out, vals_out = [], [], []
    for row in range(height):
        px = np.arange(width) + 0.5
        py = np.full(width, row + 0.5)
        alpha = _alpha_rows(mean2d, abc, opacity, px, py, settings)
        weights = _weights_from_alpha(alpha, settings)
        gi, pi = np.nonzero(weights)
        rows_out.append(row * width + pi)
        cols_out.append(order[gi])
        vals_out.append(weights[gi, pi])
    if not rows_out:
        return (np.empty(0, dtype=np.int64), np.empty(0, dtype=np.int64), np.empty(0))
    return (np.concatenate(rows_out), np.concatenate(cols_out), np.concatenate(vals_out))


def _blend_values(weights: sp.csr_matrix, values: np.ndarray,
                  height: int, width: int) -> np.ndarray:
    out = weights @ np.asarray(values, dtype=np.float64)
    return out.reshape(height, width, values.shape[1])


def render_rgb(scene: GaussianScene, cam: Camera,
               settings: RasterSettings = DEFAULT_SETTINGS,
               reference: bool = False) -> np.ndarray:
    """Alpha-blend SH colors of all Gaussians into an (H, W, 3) image.

    Background is black (zero contribution where transmittance remains).
    """
    weights = compute_blend_weights(scene, cam, None, settings, reference=reference)
    dirs = scene.means - cam.camera_center()
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    dirs = dirs / np.maximum(norms, 1e-12)
    colors = eval_sh_colors(scene.sh_coeffs, dirs)
    return _blend_values(weights, colors, cam.height, cam.width)


def render_rgb_reference(scene: GaussianScene, cam: Camera,
                         settings: RasterSettings = DEFAULT_SETTINGS) -> np.ndarray:
    return render_rgb(scene, cam, settings, reference=True)


@dataclass
class FeatureRender:
    """A rendered feature map plus the cached blend weights needed for the
    backward pass. ``indices`` are the scene Gaussians that participated, in
    the column order of ``weights``."""

    values: np.ndarray               # (H, W, D)
    indices: np.ndarray              # (M,) scene indices
    weights: Optional[sp.csr_matrix]  # (H*W, M); None if caching was disabled
    head: str


def render_features(scene: GaussianScene, field, cam: Camera,
                    head: str = "semantic",
                    render_size: Optional[tuple[int, int]] = None,
                    settings: RasterSettings = DEFAULT_SETTINGS,
                    cache_weights: bool = True,
                    reference: bool = False) -> FeatureRender:
    """Alpha-blend per-Gaussian field embeddings into a dense feature map.

    Only selection-masked Gaussians contribute; blending runs over that subset.
    ``render_size`` (width, height) decouples the feature resolution from the
    camera resolution. The semantic head emits unit vectors per Gaussian; the
    blended pixel values are left unnormalized.
    """
    if head not in ("semantic", "regularizer"):
        raise ConfigurationError(f"unknown feature head {head!r}")
    if render_size is not None:
        cam = cam.scaled(*render_size)
    indices = np.flatnonzero(scene.selection_mask)
    weights = compute_blend_weights(scene, cam, indices, settings, reference=reference)
    fwd = field.forward_gaussians(scene.means[indices], indices)
    feats = fwd.semantic if head == "semantic" else fwd.regularizer
    values = _blend_values(weights, feats, cam.height, cam.width)
    return FeatureRender(values=values, indices=indices,
                         weights=weights if cache_weights else None, head=head)


def backward_features(render: FeatureRender, upstream: np.ndarray) -> np.ndarray:
    """Gradient of the rendered map w.r.t. per-Gaussian features.

    Exact adjoint of the forward blend: gradient of Gaussian k is the
    weight-scaled sum of upstream gradients over the pixels it touched.
    Returns (len(render.indices), D), aligned with ``render.indices``.
    """
    if render.weights is None:
        raise UsageError("forward pass was run without cache_weights=True")
    upstream = np.asarray(upstream, dtype=np.float64)
    h, w = render.values.shape[:2]
    if upstream.shape[:2] != (h, w):
        raise ConfigurationError("upstream gradient resolution mismatch")
    return render.weights.T @ upstream.reshape(h * w, -1)
