"""Gaussian scene data: per-Gaussian parameters, cameras, covariance assembly,
density evaluation and spherical-harmonic color evaluation.

Scenes are stored struct-of-arrays in float64. Raw (pre-activation) values are
kept as loaded: log-scales, opacity logits, unnormalized quaternions. All
activations happen on read, so a load -> save round trip is lossless.

Conventions:
  - quaternions are stored (w, x, y, z) and normalized lazily on use;
  - exponentiated scales are floored at ``SCALE_FLOOR`` to keep covariances
    invertible;
  - SH coefficients use the reference Gaussian-splatting ordering: 16 real
    basis functions (DC, then bands 1..3) per color channel;
  - world-to-camera transforms map x_cam = R @ x_world + t with the camera
    looking down +z.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit

from .errors import DegenerateGaussianError, InvalidParameterError

SCALE_FLOOR = 1e-6  # world units; keeps Sigma invertible for degenerate inputs

# Real spherical-harmonic constants, reference-GS ordering and signs.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)

SH_COEFFS_PER_CHANNEL = 16  # degree-3 expansion


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Convert quaternions (..., 4) in (w, x, y, z) order to rotation matrices.

    Input need not be unit norm; it is normalized here. Zero quaternions are
    rejected.
    """
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if not np.all(np.isfinite(q)) or np.any(norm < 1e-30):
        raise InvalidParameterError("quaternion must be finite and nonzero")
    w, x, y, z = np.moveaxis(q / norm, -1, 0)

    rot = np.empty(q.shape[:-1] + (3, 3), dtype=np.float64)
    rot[..., 0, 0] = 1 - 2 * (y * y + z * z)
    rot[..., 0, 1] = 2 * (x * y - w * z)
    rot[..., 0, 2] = 2 * (x * z + w * y)
    rot[..., 1, 0] = 2 * (x * y + w * z)
    rot[..., 1, 1] = 1 - 2 * (x * x + z * z)
    rot[..., 1, 2] = 2 * (y * z - w * x)
    rot[..., 2, 0] = 2 * (x * z - w * y)
    rot[..., 2, 1] = 2 * (y * z + w * x)
    rot[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return rot


def assemble_covariance(rotation: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Build the 3x3 covariance R S S^T R^T from a quaternion and axis stddevs.

    ``scale`` holds per-axis standard deviations (already exponentiated).
    The result is symmetrized to remove floating-point asymmetry.
    """
    scale = np.asarray(scale, dtype=np.float64)
    if scale.shape[-1] != 3 or not np.all(np.isfinite(scale)):
        raise InvalidParameterError("scale must be a finite 3-vector")
    rot = quat_to_rotmat(rotation)
    rs = rot * scale[..., None, :]
    cov = rs @ np.swapaxes(rs, -1, -2)
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


@dataclass
class Gaussian:
    """A single anisotropic 3D Gaussian with appearance parameters.

    Stores raw values: ``log_scale`` (log of axis stddevs), ``opacity_logit``
    and an unnormalized quaternion. ``sh_coeffs`` is (16, 3): coefficient
    index first, color channel second.
    """

    mean: np.ndarray
    rotation: np.ndarray
    log_scale: np.ndarray
    opacity_logit: float
    sh_coeffs: np.ndarray = field(
        default_factory=lambda: np.zeros((SH_COEFFS_PER_CHANNEL, 3))
    )

    @property
    def scale(self) -> np.ndarray:
        return np.maximum(np.exp(np.asarray(self.log_scale, dtype=np.float64)), SCALE_FLOOR)

    @property
    def opacity(self) -> float:
        return float(expit(self.opacity_logit))

    def covariance(self) -> np.ndarray:
        return assemble_covariance(self.rotation, self.scale)


def gaussian_density(g: Gaussian, x: np.ndarray) -> float:
    """Unnormalized Gaussian density exp(-1/2 (x-mu)^T Sigma^-1 (x-mu)).

    Equals 1 at the mean and decays along every ray from it.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (3,) or not np.all(np.isfinite(x)):
        raise InvalidParameterError("query point must be a finite 3-vector")
    cov = g.covariance()
    try:
        sol = np.linalg.solve(cov, x - np.asarray(g.mean, dtype=np.float64))
    except np.linalg.LinAlgError as exc:
        raise DegenerateGaussianError("covariance is singular") from exc
    quad = float((x - g.mean) @ sol)
    if not np.isfinite(quad):
        raise DegenerateGaussianError("covariance is numerically degenerate")
    return float(np.exp(-0.5 * quad))


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a rigid world-to-camera transform.

    ``rotation``/``translation`` map world points into the camera frame
    (camera looks down +z). Pixel (row i, col j) samples the continuous image
    plane at (j + 0.5, i + 0.5).
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))
        if not (self.fx > 0 and self.fy > 0):
            raise InvalidParameterError("focal lengths must be positive")
        if self.width < 1 or self.height < 1:
            raise InvalidParameterError("image size must be at least 1x1")
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise InvalidParameterError("pose must be a 3x3 rotation and 3-vector")
        err = np.abs(self.rotation @ self.rotation.T - np.eye(3)).max()
        if not np.isfinite(err) or err > 1e-6:
            raise InvalidParameterError(
                f"world_to_camera rotation is not orthonormal (deviation {err:.2e})"
            )

    def world_to_camera_points(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def camera_center(self) -> np.ndarray:
        """Camera position in world coordinates."""
        return -self.rotation.T @ self.translation

    def scaled(self, width: int, height: int) -> "Camera":
        """Same viewpoint re-targeted to a different pixel resolution."""
        sx = width / self.width
        sy = height / self.height
        return replace(
            self,
            fx=self.fx * sx,
            fy=self.fy * sy,
            cx=self.cx * sx,
            cy=self.cy * sy,
            width=width,
            height=height,
        )


class GaussianScene:
    """A set of Gaussians plus the per-Gaussian semantic selection mask.

    All arrays are float64 struct-of-arrays. The scene is immutable during
    rendering; every operation here is a pure read.
    """

    def __init__(self, means, rotations, log_scales, opacity_logits, sh_coeffs,
                 selection_mask=None):
        self.means = np.ascontiguousarray(means, dtype=np.float64)
        self.rotations = np.ascontiguousarray(rotations, dtype=np.float64)
        self.log_scales = np.ascontiguousarray(log_scales, dtype=np.float64)
        self.opacity_logits = np.ascontiguousarray(opacity_logits, dtype=np.float64)
        self.sh_coeffs = np.ascontiguousarray(sh_coeffs, dtype=np.float64)
        n = self.means.shape[0]
        if self.means.shape != (n, 3) or self.rotations.shape != (n, 4) \
                or self.log_scales.shape != (n, 3) or self.opacity_logits.shape != (n,) \
                or self.sh_coeffs.shape != (n, SH_COEFFS_PER_CHANNEL, 3):
            raise InvalidParameterError("inconsistent scene array shapes")
        if selection_mask is None:
            selection_mask = np.ones(n, dtype=bool)
        self.selection_mask = np.ascontiguousarray(selection_mask, dtype=bool)
        if self.selection_mask.shape != (n,):
            raise InvalidParameterError("selection mask length must equal gaussian count")

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def scales(self) -> np.ndarray:
        return np.maximum(np.exp(self.log_scales), SCALE_FLOOR)

    @property
    def opacities(self) -> np.ndarray:
        return expit(self.opacity_logits)

    def covariances(self) -> np.ndarray:
        return assemble_covariance(self.rotations, self.scales)

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            mean=self.means[i],
            rotation=self.rotations[i],
            log_scale=self.log_scales[i],
            opacity_logit=float(self.opacity_logits[i]),
            sh_coeffs=self.sh_coeffs[i],
        )

    def with_selection(self, mask: np.ndarray) -> "GaussianScene":
        return GaussianScene(self.means, self.rotations, self.log_scales,
                             self.opacity_logits, self.sh_coeffs, mask)


def _sh_basis(dirs: np.ndarray) -> np.ndarray:
    """Evaluate the 16 real SH basis functions at unit directions (..., 3)."""
    x, y, z = np.moveaxis(np.asarray(dirs, dtype=np.float64), -1, 0)
    xx, yy, zz = x * x, y * y, z * z
    basis = np.empty(x.shape + (SH_COEFFS_PER_CHANNEL,), dtype=np.float64)
    basis[..., 0] = SH_C0
    basis[..., 1] = -SH_C1 * y
    basis[..., 2] = SH_C1 * z
    basis[..., 3] = -SH_C1 * x
    basis[..., 4] = SH_C2[0] * x * y
    basis[..., 5] = SH_C2[1] * y * z
    basis[..., 6] = SH_C2[2] * (2 * zz - xx - yy)
    basis[..., 7] = SH_C2[3] * x * z
    basis[..., 8] = SH_C2[4] * (xx - yy)
    basis[..., 9] = SH_C3[0] * y * (3 * xx - yy)
    basis[..., 10] = SH_C3[1] * x * y * z
    basis[..., 11] = SH_C3[2] * y * (4 * zz - xx - yy)
    basis[..., 12] = SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy)
    basis[..., 13] = SH_C3[4] * x * (4 * zz - xx - yy)
    basis[..., 14] = SH_C3[5] * z * (xx - yy)
    basis[..., 15] = SH_C3[6] * x * (xx - 3 * yy)
    return basis


def eval_sh_colors(sh_coeffs: np.ndarray, view_dirs: np.ndarray) -> np.ndarray:
    """Evaluate SH color for a batch: (N, 16, 3) coeffs, (N, 3) unit dirs.

    Adds the standard 0.5 offset and clamps at zero only (no upper clamp).
    """
    basis = _sh_basis(view_dirs)  # (N, 16)
    colors = np.einsum("nc,ncd->nd", basis, np.asarray(sh_coeffs, dtype=np.float64)) + 0.5
    return np.maximum(colors, 0.0)


def eval_sh_color(g: Gaussian, view_dir: np.ndarray) -> np.ndarray:
    """RGB color of one Gaussian seen from a unit view direction."""
    return eval_sh_colors(g.sh_coeffs[None], np.asarray(view_dir, dtype=np.float64)[None])[0]


def look_at_camera(position, target, up, fx, fy, width, height,
                   cx=None, cy=None) -> Camera:
    """Build a +z-forward camera at ``position`` looking toward ``target``."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])  # rows: camera axes in world frame
    return Camera(fx=fx, fy=fy,
                  cx=width / 2.0 if cx is None else cx,
                  cy=height / 2.0 if cy is None else cy,
                  width=width, height=height,
                  rotation=rot, translation=-rot @ position)
