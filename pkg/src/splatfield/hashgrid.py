"""Multi-resolution hash grid encoder with analytic gradients.

Each level stores a table of trainable feature rows. A query point is
trilinearly interpolated from the 8 surrounding vertices per level and the
per-level results are concatenated. Coarse levels whose vertex count fits
the table are indexed densely; finer levels fall back to a spatial hash
(XOR of coordinate-prime products, masked to the power-of-two table size).

Gradients are returned sparsely (COO rows per level) and the query-point
gradient is the piecewise-linear derivative of the interpolation weights.
At cell boundaries the derivative is one-sided, taken from the cell chosen
by floor(); finite-difference checks must avoid boundary points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Coordinate primes of the classic 3D spatial hash; the first is 1 so that
# dense and hashed indexing agree on the x axis.
HASH_PRIMES = (1, 2654435761, 805459861)

# Binary corner offsets of a cell, in x-fastest order.
_CORNERS = np.array(
    [[x, y, z] for z in (0, 1) for y in (0, 1) for x in (0, 1)],
    dtype=np.int64,
)


@dataclass(frozen=True)
class HashGridConfig:
    levels: int = 16
    base_resolution: int = 16
    per_level_scale: float = 1.5
    table_size: int = 2 ** 19
    features_per_level: int = 2
    bounds_min: tuple[float, float, float] = (-1.0, -1.0, -1.0)
    bounds_max: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.levels < 1:
            raise ValueError("levels must be >= 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two")
        if self.per_level_scale <= 1.0:
            raise ValueError("per_level_scale must be > 1 so resolutions "
                             "strictly increase")
        if self.base_resolution < 1:
            raise ValueError("base_resolution must be >= 1")
        lo, hi = np.asarray(self.bounds_min), np.asarray(self.bounds_max)
        if not (lo < hi).all():
            raise ValueError("bounds_min must be < bounds_max componentwise")
        if len(set(self.resolutions)) != self.levels:
            raise ValueError("per-level resolutions must be strictly "
                             "increasing; adjust base/scale")

    @property
    def resolutions(self) -> tuple[int, ...]:
        return tuple(
            int(np.floor(self.base_resolution * self.per_level_scale ** l))
            for l in range(self.levels)
        )

    @property
    def output_dim(self) -> int:
        return self.levels * self.features_per_level

    def level_is_dense(self, level: int) -> bool:
        res = self.resolutions[level]
        return (res + 1) ** 3 <= self.table_size


class HashGridParams:
    """Trainable feature tables, one (table_size, features_per_level) table
    per level, stored as a single (L, T, f) array."""

    def __init__(self, tables: np.ndarray):
        self.tables = np.ascontiguousarray(tables, dtype=np.float64)

    @classmethod
    def init(cls, config: HashGridConfig, rng: np.random.Generator,
             scale: float = 1e-4) -> "HashGridParams":
        shape = (config.levels, config.table_size, config.features_per_level)
        return cls(rng.uniform(-scale, scale, size=shape))

    @classmethod
    def zeros(cls, config: HashGridConfig) -> "HashGridParams":
        shape = (config.levels, config.table_size, config.features_per_level)
        return cls(np.zeros(shape))

    def copy(self) -> "HashGridParams":
        return HashGridParams(self.tables.copy())


@dataclass
class HashGridGrads:
    """Sparse table gradients: per level, COO (row indices, gradient rows).

    Indices may repeat; consumers must sum duplicates (``np.add.at`` or the
    optimizer's sparse update).
    """

    levels: list[tuple[np.ndarray, np.ndarray]] = field(default_factory=list)

    def to_dense(self, config: HashGridConfig) -> np.ndarray:
        dense = np.zeros(
            (config.levels, config.table_size, config.features_per_level))
        for level, (idx, rows) in enumerate(self.levels):
            np.add.at(dense[level], idx, rows)
        return dense


def _hash_cells(cells: np.ndarray, level: int,
                config: HashGridConfig) -> np.ndarray:
    """Vectorized table index for integer vertex coords of shape (..., 3)."""
    cells = np.asarray(cells, dtype=np.int64)
    res = config.resolutions[level]
    if config.level_is_dense(level):
        stride = res + 1
        return cells[..., 0] + cells[..., 1] * stride \
            + cells[..., 2] * stride * stride
    acc = cells[..., 0] * HASH_PRIMES[0]
    acc = np.bitwise_xor(acc, cells[..., 1] * HASH_PRIMES[1])
    acc = np.bitwise_xor(acc, cells[..., 2] * HASH_PRIMES[2])
    return np.bitwise_and(acc, config.table_size - 1)


def hash_index(cell, level: int, config: HashGridConfig) -> int:
    """Table index of one integer vertex coordinate at ``level``."""
    if level >= config.levels:
        raise ValueError(f"level {level} out of range (L={config.levels})")
    return int(_hash_cells(np.asarray(cell), level, config))


def _normalized(xs: np.ndarray, config: HashGridConfig) -> np.ndarray:
    lo = np.asarray(config.bounds_min, dtype=np.float64)
    hi = np.asarray(config.bounds_max, dtype=np.float64)
    return np.clip((xs - lo) / (hi - lo), 0.0, 1.0)


def _level_cells(p: np.ndarray, res: int):
    """Cell coords and in-cell fractions for normalized points (P, 3)."""
    s = p * res
    cell = np.minimum(np.floor(s), res - 1.0).astype(np.int64)
    frac = s - cell
    return cell, frac


def _corner_weights(frac: np.ndarray) -> np.ndarray:
    """Trilinear weights (P, 8) for in-cell fractions (P, 3)."""
    f = frac[:, None, :]                          # (P, 1, 3)
    c = _CORNERS[None, :, :]                      # (1, 8, 3)
    return np.prod(np.where(c == 1, f, 1.0 - f), axis=2)


def encode_batch(xs: np.ndarray, params: HashGridParams,
                 config: HashGridConfig) -> np.ndarray:
    """Encode (P, 3) points to (P, L*f) concatenated level features."""
    xs = np.asarray(xs, dtype=np.float64)
    if not np.isfinite(xs).all():
        raise ValueError("hash grid query points must be finite")
    p = _normalized(xs, config)
    out = np.empty((xs.shape[0], config.output_dim))
    f = config.features_per_level
    for level in range(config.levels):
        cell, frac = _level_cells(p, config.resolutions[level])
        corners = cell[:, None, :] + _CORNERS[None, :, :]     # (P, 8, 3)
        idx = _hash_cells(corners, level, config)             # (P, 8)
        w = _corner_weights(frac)                             # (P, 8)
        feats = params.tables[level][idx]                     # (P, 8, f)
        out[:, level * f:(level + 1) * f] = np.einsum(
            "pk,pkf->pf", w, feats)
    return out


def encode(x: np.ndarray, params: HashGridParams,
           config: HashGridConfig) -> np.ndarray:
    """Encode a single 3-vector to its (L*f,) feature."""
    return encode_batch(np.asarray(x, dtype=np.float64)[None, :],
                        params, config)[0]


def encode_backward_batch(
    xs: np.ndarray,
    params: HashGridParams,
    config: HashGridConfig,
    upstream: np.ndarray,
) -> tuple[HashGridGrads, np.ndarray]:
    """Backward pass for (P, 3) points with upstream (P, L*f).

    Returns sparse table gradients (at most 8 rows per point per level)
    and the (P, 3) gradient with respect to the query points.
    """
    xs = np.asarray(xs, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    p = _normalized(xs, config)
    lo = np.asarray(config.bounds_min, dtype=np.float64)
    hi = np.asarray(config.bounds_max, dtype=np.float64)
    raw = (xs - lo) / (hi - lo)
    inside = ((raw > 0.0) & (raw < 1.0)).astype(np.float64)   # clamp => d/dx = 0

    f = config.features_per_level
    grads = HashGridGrads()
    grad_x = np.zeros_like(xs)
    for level in range(config.levels):
        res = config.resolutions[level]
        cell, frac = _level_cells(p, res)
        corners = cell[:, None, :] + _CORNERS[None, :, :]
        idx = _hash_cells(corners, level, config)
        w = _corner_weights(frac)
        up = upstream[:, level * f:(level + 1) * f]           # (P, f)
        # d(out)/d(table row) = weight * upstream
        rows = w[:, :, None] * up[:, None, :]                 # (P, 8, f)
        grads.levels.append((idx.reshape(-1), rows.reshape(-1, f)))
        # d(out)/dx via the weight products, one axis at a time
        feats = params.tables[level][idx]                     # (P, 8, f)
        dot = np.einsum("pkf,pf->pk", feats, up)              # (P, 8)
        fr = frac[:, None, :]
        cn = _CORNERS[None, :, :]
        factors = np.where(cn == 1, fr, 1.0 - fr)             # (P, 8, 3)
        sign = np.where(cn == 1, 1.0, -1.0)
        scale = res / (hi - lo)                               # (3,)
        for d in range(3):
            others = [a for a in range(3) if a != d]
            dw = sign[:, :, d] * factors[:, :, others[0]] \
                * factors[:, :, others[1]]                    # (P, 8)
            grad_x[:, d] += (dot * dw).sum(axis=1) * scale[d] * inside[:, d]
    return grads, grad_x


def encode_backward(
    x: np.ndarray,
    params: HashGridParams,
    config: HashGridConfig,
    upstream: np.ndarray,
) -> tuple[HashGridGrads, np.ndarray]:
    """Backward pass for a single point; see :func:`encode_backward_batch`."""
    grads, gx = encode_backward_batch(
        np.asarray(x, dtype=np.float64)[None, :], params, config,
        np.asarray(upstream, dtype=np.float64)[None, :])
    return grads, gx[0]
