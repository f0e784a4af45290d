"""Semantic feature fields for 3D Gaussian-splatting scenes.

The library renders dense vision-language feature maps by alpha-blending
per-Gaussian embeddings decoded from a multi-resolution hash encoding, trains
that field by distilling externally supplied feature maps, and answers
open-vocabulary queries through relevancy scoring.
"""

from .scene import (Camera, Gaussian, GaussianScene, assemble_covariance,
                    eval_sh_color, eval_sh_colors, gaussian_density,
                    look_at_camera)
from .render import (FeatureRender, ProjectedGaussian, RasterSettings,
                     backward_features, compute_blend_weights, project_gaussian,
                     render_features, render_rgb, render_rgb_reference,
                     sort_by_depth)
from .field import (HashFeatureField, HashGridConfig, PerGaussianField,
                    bounds_from_points, hash_corner)
from .distill import (RAdam, SupervisionPair, TrainConfig, build_hybrid_clip,
                      clip_loss, dino_loss, learning_rate,
                      pixel_alignment_loss, select_gaussians, total_loss, train)
from .query import (CANONICAL_PHRASES, QuerySet, average_precision, detect,
                    map_score, miou, relevancy, segment)

__version__ = "0.1.0"

__all__ = [
    "Camera", "Gaussian", "GaussianScene", "assemble_covariance",
    "eval_sh_color", "eval_sh_colors", "gaussian_density", "look_at_camera",
    "FeatureRender", "ProjectedGaussian", "RasterSettings", "backward_features",
    "compute_blend_weights", "project_gaussian", "render_features", "render_rgb",
    "render_rgb_reference", "sort_by_depth",
    "HashFeatureField", "HashGridConfig", "PerGaussianField",
    "bounds_from_points", "hash_corner",
    "RAdam", "SupervisionPair", "TrainConfig", "build_hybrid_clip", "clip_loss",
    "dino_loss", "learning_rate", "pixel_alignment_loss", "select_gaussians",
    "total_loss", "train",
    "CANONICAL_PHRASES", "QuerySet", "average_precision", "detect", "map_score",
    "miou", "relevancy", "segment",
]
