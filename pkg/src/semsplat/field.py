"""Multi-resolution hash-encoded feature field with two decoder heads.

A 3D position is normalized into the field bounds, trilinearly interpolated
against trainable per-level hash tables, and the concatenated encoding (plus
optional auxiliary inputs) is decoded by two separate MLPs: a semantic head
whose output is normalized to a unit vector, and an unconstrained regularizer
head. Forward passes cache everything the manual backward pass needs; table
gradients are scattered through the interpolation weights.

Coarse levels whose full grid fits in the table are indexed densely (and thus
injectively); finer levels use the standard spatial hash
x*1 xor y*2654435761 xor z*805459861 modulo the table size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigurationError, InvalidParameterError, UsageError

HASH_PRIMES = (np.uint64(1), np.uint64(2654435761), np.uint64(805459861))

TABLE_INIT_RANGE = 1e-4
NORM_GUARD = 1e-12

# Corner k of a voxel offsets by bit pattern (k & 1, k >> 1 & 1, k >> 2 & 1).
_CORNER_OFFSETS = np.array([[(k >> a) & 1 for a in range(3)] for k in range(8)],
                           dtype=np.int64)


@dataclass(frozen=True)
class HashGridConfig:
    """Shape of the multi-resolution hash encoding.

    ``bounds_lo``/``bounds_hi`` define the axis-aligned box that normalizes
    world coordinates into [0, 1]^3; queries outside are clamped.
    """

    levels: int = 24
    table_size: int = 2 ** 20
    feat_dim: int = 8
    n_min: int = 16
    n_max: int = 512
    aux_dim: int = 0
    bounds_lo: tuple = (0.0, 0.0, 0.0)
    bounds_hi: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.levels < 1:
            raise ConfigurationError("need at least one level")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ConfigurationError("table_size must be a power of two")
        if self.n_min > self.n_max or self.n_min < 1:
            raise ConfigurationError("need 1 <= n_min <= n_max")
        if self.feat_dim < 1 or self.aux_dim < 0:
            raise ConfigurationError("bad feature/aux dimension")
        lo = np.asarray(self.bounds_lo, dtype=np.float64)
        hi = np.asarray(self.bounds_hi, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise ConfigurationError("bounds must be an ordered 3D box")

    @property
    def growth_factor(self) -> float:
        if self.levels == 1:
            return 1.0
        return float(np.exp((np.log(self.n_max) - np.log(self.n_min))
                            / (self.levels - 1)))

    def level_resolution(self, level: int) -> int:
        """Grid resolution floor(n_min * b^level) of one level."""
        if not 0 <= level < self.levels:
            raise IndexError(f"level {level} out of range [0, {self.levels})")
        return int(np.floor(self.n_min * self.growth_factor ** level + 1e-9))

    @property
    def encoding_dim(self) -> int:
        return self.levels * self.feat_dim + self.aux_dim

    def level_is_dense(self, level: int) -> bool:
        res = self.level_resolution(level)
        return (res + 1) ** 3 <= self.table_size


def hash_corner(corner, level: int, config: HashGridConfig) -> int:
    """Table slot of an integer grid corner at one level.

    Dense row-major indexing (x fastest) when the level grid fits in the
    table, spatial hashing otherwise.
    """
    corner = np.asarray(corner, dtype=np.int64)
    return int(_corner_slots(corner[None], level, config)[0])


def _corner_slots(corners: np.ndarray, level: int, config: HashGridConfig) -> np.ndarray:
    res = config.level_resolution(level)
    if config.level_is_dense(level):
        side = res + 1
        return (corners[..., 0] + side * (corners[..., 1] + side * corners[..., 2])
                ).astype(np.int64)
    u = corners.astype(np.uint64)
    h = (u[..., 0] * HASH_PRIMES[0]) ^ (u[..., 1] * HASH_PRIMES[1]) \
        ^ (u[..., 2] * HASH_PRIMES[2])
    return (h & np.uint64(config.table_size - 1)).astype(np.int64)


@dataclass
class EncodeCache:
    """Fixed interpolation geometry of a batch of query positions."""

    slots: np.ndarray    # (N, L, 8) table rows per level
    weights: np.ndarray  # (N, L, 8) trilinear weights, rows sum to 1


@dataclass
class FieldForward:
    """Everything the backward pass needs from one field evaluation."""

    encoding: np.ndarray           # (N, L*D + K)
    semantic: np.ndarray           # (N, D_clip) unit rows
    regularizer: np.ndarray        # (N, D_dino)
    cache: Optional[EncodeCache]   # None for the per-Gaussian table field
    rows: Optional[np.ndarray]     # table rows for the per-Gaussian field
    sem_cache: tuple
    reg_cache: tuple


class Mlp:
    """Plain fully-connected ReLU network with manual forward/backward."""

    def __init__(self, dims: list[int], rng: np.random.Generator):
        self.dims = list(dims)
        self.weights = []
        self.biases = []
        for d_in, d_out in zip(dims[:-1], dims[1:]):
            bound = np.sqrt(6.0 / (d_in + d_out))
            self.weights.append(rng.uniform(-bound, bound, size=(d_in, d_out)))
            self.biases.append(np.zeros(d_out))

    @property
    def out_dim(self) -> int:
        return self.dims[-1]

    def forward(self, x: np.ndarray):
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return h, tuple(acts)

    def backward(self, cache: tuple, d_out: np.ndarray):
        acts = cache
        grads_w = [None] * len(self.weights)
        grads_b = [None] * len(self.biases)
        d = d_out
        for i in reversed(range(len(self.weights))):
            if i < len(self.weights) - 1:
                d = d * (acts[i + 1] > 0.0)
            grads_w[i] = acts[i].T @ d
            grads_b[i] = d.sum(axis=0)
            d = d @ self.weights[i].T
        return d, grads_w, grads_b

    def parameters(self, prefix: str) -> dict[str, np.ndarray]:
        params = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            params[f"{prefix}.w{i}"] = w
            params[f"{prefix}.b{i}"] = b
        return params


def _normalize_rows(raw: np.ndarray):
    """Unit-normalize rows; rows below the norm guard fall back to e_1."""
    norms = np.linalg.norm(raw, axis=1)
    ok = norms >= NORM_GUARD
    out = np.zeros_like(raw)
    out[ok] = raw[ok] / norms[ok, None]
    if not np.all(ok):
        out[~ok, 0] = 1.0
    return out, norms, ok


def _normalize_rows_backward(raw, unit, norms, ok, d_unit):
    """d(raw/|raw|)/d raw applied to an upstream gradient; zero on fallback rows."""
    d_raw = np.zeros_like(raw)
    if np.any(ok):
        dot = np.sum(d_unit[ok] * unit[ok], axis=1, keepdims=True)
        d_raw[ok] = (d_unit[ok] - unit[ok] * dot) / norms[ok, None]
    return d_raw


@dataclass
class FieldGradients:
    tables: np.ndarray
    by_name: dict[str, np.ndarray]


class HashFeatureField:
    """Hash-grid encoder plus semantic and regularizer decoder heads."""

    field_type = "mhe"

    def __init__(self, config: HashGridConfig, clip_dim: int = 512,
                 dino_dim: int = 384, hidden_width: int = 256,
                 hidden_layers: int = 3, seed: int = 0,
                 tables: Optional[np.ndarray] = None,
                 semantic_head: Optional[Mlp] = None,
                 regularizer_head: Optional[Mlp] = None):
        self.config = config
        self.clip_dim = clip_dim
        self.dino_dim = dino_dim
        self.hidden_width = hidden_width
        self.hidden_layers = hidden_layers
        rng = np.random.default_rng(seed)
        if tables is None:
            tables = rng.uniform(-TABLE_INIT_RANGE, TABLE_INIT_RANGE,
                                 size=(config.levels, config.table_size, config.feat_dim))
        self.tables = np.ascontiguousarray(tables, dtype=np.float64)
        if self.tables.shape != (config.levels, config.table_size, config.feat_dim):
            raise ConfigurationError("table shape does not match the grid config")
        hidden = [hidden_width] * hidden_layers
        enc = config.encoding_dim
        self.semantic_head = semantic_head or Mlp([enc, *hidden, clip_dim], rng)
        self.regularizer_head = regularizer_head or Mlp([enc, *hidden, dino_dim], rng)
        if self.semantic_head.dims[0] != enc or self.regularizer_head.dims[0] != enc:
            raise ConfigurationError("head input dimension must equal the encoding dim")

    # ---------------------------------------------------------------- encode

    def make_cache(self, positions: np.ndarray) -> EncodeCache:
        """Precompute slots and trilinear weights for fixed positions."""
        x = np.atleast_2d(np.asarray(positions, dtype=np.float64))
        if x.shape[1] != 3:
            raise InvalidParameterError("positions must be (N, 3)")
        if not np.all(np.isfinite(x)):
            raise InvalidParameterError("positions must be finite")
        cfg = self.config
        lo = np.asarray(cfg.bounds_lo)
        hi = np.asarray(cfg.bounds_hi)
        x01 = np.clip((x - lo) / (hi - lo), 0.0, 1.0)

        n = x.shape[0]
        slots = np.empty((n, cfg.levels, 8), dtype=np.int64)
        weights = np.empty((n, cfg.levels, 8), dtype=np.float64)
        for level in range(cfg.levels):
            res = cfg.level_resolution(level)
            pos = x01 * res
            base = np.minimum(np.floor(pos).astype(np.int64), res - 1)
            frac = pos - base
            corners = base[:, None, :] + _CORNER_OFFSETS[None, :, :]  # (N, 8, 3)
            slots[:, level] = _corner_slots(corners, level, cfg)
            w = np.where(_CORNER_OFFSETS[None, :, :] == 1, frac[:, None, :],
                         1.0 - frac[:, None, :])
            weights[:, level] = w.prod(axis=2)
        return EncodeCache(slots=slots, weights=weights)

    def encode_from_cache(self, cache: EncodeCache,
                          aux: Optional[np.ndarray] = None) -> np.ndarray:
        cfg = self.config
        n = cache.slots.shape[0]
        gathered = self.tables[np.arange(cfg.levels)[None, :, None],
                               cache.slots]                    # (N, L, 8, D)
        per_level = np.einsum("nlc,nlcd->nld", cache.weights, gathered)
        q = per_level.reshape(n, cfg.levels * cfg.feat_dim)
        return self._append_aux(q, aux, n)

    def _append_aux(self, q, aux, n):
        cfg = self.config
        if cfg.aux_dim == 0:
            if aux is not None:
                raise ConfigurationError("field was configured without aux inputs")
            return q
        if aux is None:
            raise ConfigurationError(f"field expects {cfg.aux_dim} aux inputs")
        aux = np.asarray(aux, dtype=np.float64)
        if aux.ndim == 1:
            aux = np.broadcast_to(aux, (n, cfg.aux_dim))
        if aux.shape != (n, cfg.aux_dim):
            raise ConfigurationError("aux input shape mismatch")
        return np.concatenate([q, aux], axis=1)

    def encode(self, x: np.ndarray, aux: Optional[np.ndarray] = None) -> np.ndarray:
        """Concatenated multi-level encoding of 3D positions.

        Accepts one position (3,) or a batch (N, 3); auxiliary inputs, when
        configured, are appended after the hash levels.
        """
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        cache = self.make_cache(x[None] if single else x)
        q = self.encode_from_cache(cache, aux)
        return q[0] if single else q

    # ---------------------------------------------------------------- decode

    def _check_q(self, q):
        q = np.asarray(q, dtype=np.float64)
        single = q.ndim == 1
        q2 = q[None] if single else q
        if q2.shape[1] != self.config.encoding_dim:
            raise ConfigurationError(
                f"encoding dim {q2.shape[1]} != configured {self.config.encoding_dim}")
        return q2, single

    def decode_semantic(self, q: np.ndarray) -> np.ndarray:
        """Unit-norm semantic embedding(s) for encoding vector(s)."""
        q2, single = self._check_q(q)
        raw, _ = self.semantic_head.forward(q2)
        unit, _, _ = _normalize_rows(raw)
        return unit[0] if single else unit

    def decode_regularizer(self, q: np.ndarray) -> np.ndarray:
        q2, single = self._check_q(q)
        out, _ = self.regularizer_head.forward(q2)
        return out[0] if single else out

    # ------------------------------------------------------- train interface

    def forward_gaussians(self, positions: np.ndarray,
                          indices: Optional[np.ndarray] = None,
                          aux: Optional[np.ndarray] = None,
                          cache: Optional[EncodeCache] = None) -> FieldForward:
        """Full forward pass at Gaussian centers, caching for backward.

        ``indices`` is accepted for interface parity with the per-Gaussian
        table field and ignored here.
        """
        if cache is None:
            cache = self.make_cache(positions)
        q = self.encode_from_cache(cache, aux)
        raw_sem, sem_acts = self.semantic_head.forward(q)
        unit, norms, ok = _normalize_rows(raw_sem)
        reg, reg_acts = self.regularizer_head.forward(q)
        return FieldForward(encoding=q, semantic=unit, regularizer=reg,
                            cache=cache, rows=None,
                            sem_cache=(sem_acts, raw_sem, unit, norms, ok),
                            reg_cache=(reg_acts,))

    def backward(self, fwd: FieldForward, d_semantic: Optional[np.ndarray],
                 d_regularizer: Optional[np.ndarray]) -> FieldGradients:
        """Chain upstream head gradients back to tables and head weights."""
        if not isinstance(fwd, FieldForward) or fwd.cache is None:
            raise UsageError("backward requires the FieldForward of a cached forward pass")
        n = fwd.encoding.shape[0]
        dq = np.zeros_like(fwd.encoding)
        by_name: dict[str, np.ndarray] = {}

        sem_acts, raw_sem, unit, norms, ok = fwd.sem_cache
        d_sem = (np.zeros((n, self.clip_dim)) if d_semantic is None
                 else np.asarray(d_semantic, dtype=np.float64))
        if d_sem.shape != (n, self.clip_dim):
            raise ConfigurationError("semantic upstream gradient shape mismatch")
        d_raw = _normalize_rows_backward(raw_sem, unit, norms, ok, d_sem)
        dq_s, gw, gb = self.semantic_head.backward(sem_acts, d_raw)
        dq += dq_s
        for i, (w, b) in enumerate(zip(gw, gb)):
            by_name[f"sem.w{i}"] = w
            by_name[f"sem.b{i}"] = b

        d_reg = (np.zeros((n, self.dino_dim)) if d_regularizer is None
                 else np.asarray(d_regularizer, dtype=np.float64))
        if d_reg.shape != (n, self.dino_dim):
            raise ConfigurationError("regularizer upstream gradient shape mismatch")
        dq_r, gw, gb = self.regularizer_head.backward(fwd.reg_cache[0], d_reg)
        dq += dq_r
        for i, (w, b) in enumerate(zip(gw, gb)):
            by_name[f"reg.w{i}"] = w
            by_name[f"reg.b{i}"] = b

        cfg = self.config
        d_tables = np.zeros_like(self.tables)
        dq_levels = dq[:, :cfg.levels * cfg.feat_dim].reshape(n, cfg.levels, cfg.feat_dim)
        contrib = fwd.cache.weights[..., None] * dq_levels[:, :, None, :]  # (N, L, 8, D)
        for level in range(cfg.levels):
            np.add.at(d_tables[level], fwd.cache.slots[:, level].ravel(),
                      contrib[:, level].reshape(-1, cfg.feat_dim))
        by_name["tables"] = d_tables
        return FieldGradients(tables=d_tables, by_name=by_name)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"tables": self.tables}
        params.update(self.semantic_head.parameters("sem"))
        params.update(self.regularizer_head.parameters("reg"))
        return params


class PerGaussianField:
    """Ablation field: one trainable encoding row per Gaussian, no hash grid.

    Rows share the encoding dimensionality of the hash field and are decoded
    by the same two heads.
    """

    field_type = "per_gaussian"

    def __init__(self, n_gaussians: int, encoding_dim: int, clip_dim: int = 512,
                 dino_dim: int = 384, hidden_width: int = 256, hidden_layers: int = 3,
                 seed: int = 0, rows: Optional[np.ndarray] = None,
                 semantic_head: Optional[Mlp] = None,
                 regularizer_head: Optional[Mlp] = None):
        self.n_gaussians = n_gaussians
        self.encoding_dim = encoding_dim
        self.clip_dim = clip_dim
        self.dino_dim = dino_dim
        self.hidden_width = hidden_width
        self.hidden_layers = hidden_layers
        rng = np.random.default_rng(seed)
        if rows is None:
            rows = rng.uniform(-TABLE_INIT_RANGE, TABLE_INIT_RANGE,
                               size=(n_gaussians, encoding_dim))
        self.rows = np.ascontiguousarray(rows, dtype=np.float64)
        hidden = [hidden_width] * hidden_layers
        self.semantic_head = semantic_head or Mlp([encoding_dim, *hidden, clip_dim], rng)
        self.regularizer_head = regularizer_head or Mlp([encoding_dim, *hidden, dino_dim], rng)

    def forward_gaussians(self, positions, indices, aux=None,
                          cache=None) -> FieldForward:
        if indices is None:
            raise UsageError("per-Gaussian field requires explicit indices")
        if aux is not None:
            raise ConfigurationError("per-Gaussian field takes no aux inputs")
        rows = np.asarray(indices, dtype=np.int64)
        q = self.rows[rows]
        raw_sem, sem_acts = self.semantic_head.forward(q)
        unit, norms, ok = _normalize_rows(raw_sem)
        reg, reg_acts = self.regularizer_head.forward(q)
        return FieldForward(encoding=q, semantic=unit, regularizer=reg,
                            cache=None, rows=rows,
                            sem_cache=(sem_acts, raw_sem, unit, norms, ok),
                            reg_cache=(reg_acts,))

    def backward(self, fwd: FieldForward, d_semantic, d_regularizer) -> FieldGradients:
        if not isinstance(fwd, FieldForward) or fwd.rows is None:
            raise UsageError("backward requires the FieldForward of a cached forward pass")
        n = fwd.encoding.shape[0]
        by_name: dict[str, np.ndarray] = {}
        dq = np.zeros_like(fwd.encoding)

        sem_acts, raw_sem, unit, norms, ok = fwd.sem_cache
        d_sem = (np.zeros((n, self.clip_dim)) if d_semantic is None
                 else np.asarray(d_semantic, dtype=np.float64))
        d_raw = _normalize_rows_backward(raw_sem, unit, norms, ok, d_sem)
        dq_s, gw, gb = self.semantic_head.backward(sem_acts, d_raw)
        dq += dq_s
        for i, (w, b) in enumerate(zip(gw, gb)):
            by_name[f"sem.w{i}"] = w
            by_name[f"sem.b{i}"] = b

        d_reg = (np.zeros((n, self.dino_dim)) if d_regularizer is None
                 else np.asarray(d_regularizer, dtype=np.float64))
        dq_r, gw, gb = self.regularizer_head.backward(fwd.reg_cache[0], d_reg)
        dq += dq_r
        for i, (w, b) in enumerate(zip(gw, gb)):
            by_name[f"reg.w{i}"] = w
            by_name[f"reg.b{i}"] = b

        d_rows = np.zeros_like(self.rows)
        np.add.at(d_rows, fwd.rows, dq)
        by_name["rows"] = d_rows
        return FieldGradients(tables=d_rows, by_name=by_name)

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"rows": self.rows}
        params.update(self.semantic_head.parameters("sem"))
        params.update(self.regularizer_head.parameters("reg"))
        return params


def bounds_from_points(points: np.ndarray, margin: float = 0.05):
    """Axis-aligned box around points, each side expanded by ``margin``."""
    points = np.asarray(points, dtype=np.float64)
    lo = points.min(axis=0)
    hi = points.max(axis=0)
    span = np.maximum(hi - lo, 1e-6)
    return tuple(lo - margin * span), tuple(hi + margin * span)
