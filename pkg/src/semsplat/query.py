"""Open-vocabulary querying and evaluation of rendered semantic feature maps.

Relevancy follows the pairwise-softmax-against-canonicals rule: for each pixel
the score is the minimum over canonical phrases of
exp(f.q) / (exp(f.q) + exp(f.c_n)), with all embeddings unit-normalized before
the dot products. Detection succeeds when the argmax pixel falls inside the
ground-truth box; segmentation assigns each pixel the class with the highest
cosine similarity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .distill import normalize_pixels
from .errors import AnnotationError, ConfigurationError

CANONICAL_PHRASES = ("object", "stuff", "things", "texture")


@dataclass
class QuerySet:
    """Labeled query embeddings plus the four canonical contrast embeddings."""

    queries: list          # [(label, (D,) unit vector)]
    canonicals: np.ndarray  # (4, D) unit rows

    def __post_init__(self):
        self.canonicals = np.asarray(self.canonicals, dtype=np.float64)
        if self.canonicals.ndim != 2 or self.canonicals.shape[0] != len(CANONICAL_PHRASES):
            raise ConfigurationError(
                f"expected {len(CANONICAL_PHRASES)} canonical embeddings")
        vecs = [np.asarray(v, dtype=np.float64) for _, v in self.queries]
        for v in vecs + list(self.canonicals):
            if abs(np.linalg.norm(v) - 1.0) > 1e-3:
                raise ConfigurationError("query/canonical embeddings must be unit norm")


def relevancy(rendered: np.ndarray, f_query: np.ndarray,
              canonicals: np.ndarray) -> np.ndarray:
    """Relevancy map in (0, 1): min over canonicals of the pairwise softmax
    between the query similarity and each canonical similarity."""
    canonicals = np.atleast_2d(np.asarray(canonicals, dtype=np.float64))
    if canonicals.shape[0] == 0:
        raise ConfigurationError("canonical embedding set must not be empty")
    f = normalize_pixels(np.asarray(rendered, dtype=np.float64))
    s_query = f @ np.asarray(f_query, dtype=np.float64)
    s_canon = np.einsum("yxc,nc->yxn", f, canonicals)
    # exp(a) / (exp(a) + exp(b)) == sigmoid(a - b), computed stably
    scores = expit(s_query[..., None] - s_canon)
    return scores.min(axis=-1)


def detect(relevancy_map: np.ndarray, gt_box) -> tuple[bool, tuple[int, int]]:
    """Detection protocol: success iff the highest-relevancy pixel lies inside
    the inclusive box (x0, y0, x1, y1). Ties resolve to the first pixel in
    row-major order. Returns (success, (row, col))."""
    rel = np.asarray(relevancy_map, dtype=np.float64)
    x0, y0, x1, y1 = (int(v) for v in gt_box)
    h, w = rel.shape
    if x1 < x0 or y1 < y0:
        raise AnnotationError(f"degenerate box {gt_box}")
    if x0 < 0 or y0 < 0 or x1 >= w or y1 >= h:
        raise AnnotationError(f"box {gt_box} exceeds the {w}x{h} image")
    row, col = np.unravel_index(int(np.argmax(rel)), rel.shape)
    return bool(x0 <= col <= x1 and y0 <= row <= y1), (int(row), int(col))


def segment(rendered: np.ndarray, class_embeddings: np.ndarray) -> np.ndarray:
    """Per-pixel class labels: argmax of cosine similarity to each class
    embedding (softmax over the logits does not change the argmax). Ties go to
    the lowest class index."""
    class_embeddings = np.atleast_2d(np.asarray(class_embeddings, dtype=np.float64))
    if class_embeddings.shape[0] < 2:
        raise ConfigurationError("segmentation needs at least two classes")
    f = normalize_pixels(np.asarray(rendered, dtype=np.float64))
    if f.shape[-1] != class_embeddings.shape[1]:
        raise ConfigurationError("class embedding dimension mismatch")
    cls = class_embeddings / np.linalg.norm(class_embeddings, axis=1, keepdims=True)
    logits = np.einsum("yxc,nc->yxn", f, cls)
    return logits.argmax(axis=-1)


def miou(pred: np.ndarray, gt: np.ndarray, n_classes: int | None = None,
         valid_mask: np.ndarray | None = None) -> float:
    """Mean intersection-over-union across classes.

    Classes absent from both prediction and ground truth are excluded.
    ``valid_mask`` restricts the evaluation to a pixel subset (e.g. region
    interiors).
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise ConfigurationError("prediction/ground-truth resolution mismatch")
    if valid_mask is not None:
        pred = pred[valid_mask]
        gt = gt[valid_mask]
    if n_classes is None:
        n_classes = int(max(pred.max(initial=0), gt.max(initial=0))) + 1
    ious = []
    for c in range(n_classes):
        p = pred == c
        g = gt == c
        union = np.logical_or(p, g).sum()
        if union == 0:
            continue
        ious.append(np.logical_and(p, g).sum() / union)
    return float(np.mean(ious)) if ious else 0.0


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """Area under the precision-recall curve of a ranking.

    Computed as the mean of precision at each positive, ranked by descending
    score (ties resolved by input order, deterministically).
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    positives = np.asarray(positives, dtype=bool).ravel()
    if scores.shape != positives.shape:
        raise ConfigurationError("scores/labels shape mismatch")
    n_pos = int(positives.sum())
    if n_pos == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    cum_tp = np.cumsum(hits)
    precision = cum_tp / np.arange(1, scores.size + 1)
    return float(precision[hits].sum() / n_pos)


def map_score(relevancy_maps: np.ndarray, gt_masks: np.ndarray) -> float:
    """Mean average precision over classes, using each class's per-pixel
    relevancy as the ranking score against its binary ground-truth mask.
    Classes without any positive pixel are skipped."""
    relevancy_maps = np.asarray(relevancy_maps, dtype=np.float64)
    gt_masks = np.asarray(gt_masks, dtype=bool)
    if relevancy_maps.shape != gt_masks.shape:
        raise ConfigurationError("relevancy/mask resolution mismatch")
    aps = [average_precision(r, m) for r, m in zip(relevancy_maps, gt_masks)
           if m.any()]
    return float(np.mean(aps)) if aps else 0.0
