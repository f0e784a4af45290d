import numpy as np
import pytest
from scipy.special import logit

from semsplat import (Camera, GaussianScene, HashFeatureField, HashGridConfig,
                      bounds_from_points, look_at_camera)


def make_random_scene(n, seed, spread=0.8, scale_range=(0.05, 0.3),
                      opacity_range=(0.3, 0.95)):
    rng = np.random.default_rng(seed)
    means = rng.uniform(-spread, spread, (n, 3))
    means[:, 2] = rng.uniform(-0.5 * spread, 0.5 * spread, n)
    return GaussianScene(
        means=means,
        rotations=rng.standard_normal((n, 4)),
        log_scales=np.log(rng.uniform(*scale_range, (n, 3))),
        opacity_logits=logit(rng.uniform(*opacity_range, n)),
        sh_coeffs=rng.standard_normal((n, 16, 3)) * 0.3,
    )


def make_camera(width=64, height=64, fx=60.0, position=(0.0, 0.0, 4.0),
                target=(0.0, 0.0, 0.0)) -> Camera:
    return look_at_camera(position, target, up=(0, 1, 0), fx=fx, fy=fx,
                          width=width, height=height)


def make_micro_field(scene, clip_dim=6, dino_dim=4, seed=3, table_scale=0.3):
    """2-level toy field over the scene bounds with nonzero tables."""
    lo, hi = bounds_from_points(scene.means)
    cfg = HashGridConfig(levels=2, table_size=64, feat_dim=2, n_min=4, n_max=8,
                         bounds_lo=lo, bounds_hi=hi)
    field = HashFeatureField(cfg, clip_dim=clip_dim, dino_dim=dino_dim,
                             hidden_width=16, hidden_layers=1, seed=seed)
    rng = np.random.default_rng(seed)
    field.tables[:] = rng.standard_normal(field.tables.shape) * table_scale
    return field


@pytest.fixture
def micro_setup():
    """Spec micro configuration: 16 Gaussians, 8x8 render, 2-level grid."""
    scene = make_random_scene(16, seed=5, scale_range=(0.25, 0.5),
                              opacity_range=(0.6, 0.95))
    cam = make_camera(width=8, height=8, fx=8.0)
    field = make_micro_field(scene)
    return scene, cam, field


def fd_gradient(fn, array, indices, h=1e-6):
    """Central finite differences of scalar fn at the given flat indices."""
    flat = array.ravel()
    grads = np.empty(len(indices))
    for k, i in enumerate(indices):
        old = flat[i]
        flat[i] = old + h
        fp = fn()
        flat[i] = old - h
        fm = fn()
        flat[i] = old
        grads[k] = (fp - fm) / (2 * h)
    return grads


def max_rel_err(analytic, numeric, floor=1e-7):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom))
