"""Patch-pyramid and dense feature extraction into semsplat containers.

For each pyramid scale fraction s the image is tiled with square patches of
side s * max(W, H) and stride of half a patch (edges snapped so the whole
image is covered). Each patch is embedded, the embedding is spread over the
stride-sized grid cells the patch covers, overlaps are averaged and every
cell is normalized to a unit vector. One container block is emitted per
scale, ascending.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from semsplat.io import write_feature_container
from semsplat.query import CANONICAL_PHRASES

from .embedders import DEFAULT_CLIP, DEFAULT_DINO

DEFAULT_SCALES = tuple(float(s) for s in np.geomspace(0.05, 0.5, 7))


@dataclass
class ExtractionSpec:
    images: list
    scales: tuple = DEFAULT_SCALES
    clip_backend: str = DEFAULT_CLIP
    dino_backend: str = DEFAULT_DINO
    out_dir: Path = Path("features")

    def __post_init__(self):
        scales = tuple(float(s) for s in self.scales)
        if not scales or any(b <= a for a, b in zip(scales, scales[1:])):
            raise ValueError("scale fractions must be strictly increasing")
        if scales[0] <= 0.0 or scales[-1] > 1.0:
            raise ValueError("scale fractions must lie in (0, 1]")
        self.scales = scales


def _positions(extent: int, patch: int, stride: int):
    if patch >= extent:
        return [0]
    pos = list(range(0, extent - patch + 1, stride))
    if pos[-1] != extent - patch:
        pos.append(extent - patch)
    return pos


def _unit_rows(mat):
    return mat / np.maximum(np.linalg.norm(mat, axis=-1, keepdims=True), 1e-12)


def extract_clip_pyramid(image: np.ndarray, embedder, scales=DEFAULT_SCALES):
    """Per-scale patch-embedding maps for one image.

    Returns [(scale_fraction, (gh, gw, D) unit-normalized map)], ascending.
    """
    image = np.asarray(image, dtype=np.float64)
    h, w = image.shape[:2]
    levels = []
    for fraction in scales:
        patch = max(2, int(round(fraction * max(w, h))))
        patch = min(patch, min(w, h))
        stride = max(1, patch // 2)
        ys = _positions(h, patch, stride)
        xs = _positions(w, patch, stride)
        crops = [image[y:y + patch, x:x + patch] for y in ys for x in xs]
        embeddings = embedder.embed_patches(crops)

        gh = (h + stride - 1) // stride
        gw = (w + stride - 1) // stride
        acc = np.zeros((gh, gw, embeddings.shape[1]))
        cnt = np.zeros((gh, gw, 1))
        k = 0
        for y in ys:
            gy0, gy1 = y // stride, (y + patch - 1) // stride
            for x in xs:
                gx0, gx1 = x // stride, (x + patch - 1) // stride
                acc[gy0:gy1 + 1, gx0:gx1 + 1] += embeddings[k]
                cnt[gy0:gy1 + 1, gx0:gx1 + 1] += 1.0
                k += 1
        levels.append((float(fraction), _unit_rows(acc / np.maximum(cnt, 1.0))))
    return levels


def write_clip_pyramid(path, image: np.ndarray, embedder,
                       scales=DEFAULT_SCALES) -> None:
    """Extract and serialize a pyramid container (main payload = finest level)."""
    levels = extract_clip_pyramid(image, embedder, scales)
    write_feature_container(path, levels[0][1].astype(np.float32), "f32",
                            pyramid=[(f, m.astype(np.float32)) for f, m in levels])


def extract_dino(image: np.ndarray, embedder) -> np.ndarray:
    """Dense feature map from a single forward pass at native resolution."""
    return embedder.embed_dense(np.asarray(image, dtype=np.float64))


def write_dino(path, image: np.ndarray, embedder) -> None:
    write_feature_container(path, extract_dino(image, embedder).astype(np.float32),
                            "f32")


def embed_queries(texts, embedder):
    """Unit-norm labeled text embeddings, ready for the embedding-file writer."""
    vectors = _unit_rows(embedder.embed_texts(list(texts)))
    return list(zip(texts, vectors))


def canonical_entries(embedder):
    """Embeddings of the four canonical contrast phrases."""
    return embed_queries(list(CANONICAL_PHRASES), embedder)
