"""Nearest-containing-Gaussian search over per-primitive confidence spheres.

Each Gaussian gets a radius derived from its covariance and the quantile Q;
a query point's candidates are exactly the Gaussians whose sphere contains
the point, and the k closest by mean distance are returned, sorted. Queries
run against an immutable BVH snapshot; any structural or parameter change
to the set bumps its epoch and makes the index stale. A full-scan oracle
with identical semantics backs the tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels
from .scene import Gaussian, GaussianSet, SceneError


class StaleIndexError(RuntimeError):
    """Query against an index built from an older epoch of the set."""


def effective_radius(g: Gaussian, quantile: float,
                     raw_eigenvalue_radius: bool = False) -> float:
    """Radius of the sphere bounding the quantile-level confidence ellipsoid.

    The Euclidean half-extent of the ellipsoid {d_M <= Q} along its longest
    axis is Q * sqrt(max variance); ``raw_eigenvalue_radius`` switches to
    Q * max variance (skipping the sqrt), which does not bound the ellipsoid
    but is kept for comparison runs.
    """
    if quantile <= 0:
        raise ValueError(f"quantile must be positive, got {quantile}")
    vmax = float(np.exp(g.log_scale).max())
    return quantile * vmax if raw_eigenvalue_radius else quantile * np.sqrt(vmax)


def effective_radii(gset: GaussianSet, quantile: float,
                    raw_eigenvalue_radius: bool = False) -> np.ndarray:
    """Vectorized :func:`effective_radius` over the whole set."""
    if quantile <= 0:
        raise ValueError(f"quantile must be positive, got {quantile}")
    vmax = np.exp(gset.log_scales).max(axis=1)
    return quantile * vmax if raw_eigenvalue_radius else quantile * np.sqrt(vmax)


@dataclass
class NeighborResult:
    indices: np.ndarray     # (m,) int64, m <= k, ascending mean distance
    distances: np.ndarray   # (m,) Euclidean distances to the means
    overflowed: bool        # more than k spheres contained the query

    def __len__(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class ProximityIndex:
    """Immutable BVH over confidence-sphere AABBs. Safe to share across
    threads; rebuild after any mutation of the source set."""

    node_min: np.ndarray
    node_max: np.ndarray
    left: np.ndarray
    right: np.ndarray
    first: np.ndarray
    count: np.ndarray
    order: np.ndarray
    radii: np.ndarray
    radii_sq: np.ndarray
    built_epoch: int
    quantile: float
    t_max: float
    raw_eigenvalue_radius: bool = False

    @property
    def node_count(self) -> int:
        return self.node_min.shape[0]

    def depth(self) -> int:
        depths = np.zeros(self.node_count, dtype=np.int64)
        for node in range(self.node_count):
            if self.count[node] == 0:
                depths[self.left[node]] = depths[node] + 1
                depths[self.right[node]] = depths[node] + 1
        return int(depths.max()) + 1


def build_index(gset: GaussianSet, quantile: float,
                raw_eigenvalue_radius: bool = False) -> ProximityIndex:
    """Build the sphere BVH for the set's current epoch."""
    if len(gset) == 0:
        raise SceneError("cannot build a proximity index over an empty set")
    radii = effective_radii(gset, quantile, raw_eigenvalue_radius)
    lo = gset.means - radii[:, None]
    hi = gset.means + radii[:, None]
    (node_min, node_max, left, right, first, count, order, n_nodes) = \
        _kernels.build_bvh(lo, hi, gset.means)
    return ProximityIndex(
        node_min=node_min, node_max=node_max, left=left, right=right,
        first=first, count=count, order=order,
        radii=radii, radii_sq=radii * radii,
        built_epoch=gset.epoch, quantile=quantile,
        t_max=2.0 * float(radii.max()),
        raw_eigenvalue_radius=raw_eigenvalue_radius,
    )


def _check_fresh(index: ProximityIndex, gset: GaussianSet) -> None:
    if index.built_epoch != gset.epoch:
        raise StaleIndexError(
            f"index built at epoch {index.built_epoch}, set is at "
            f"{gset.epoch}; rebuild before querying")


def query_batch(index: ProximityIndex, gset: GaussianSet, xs: np.ndarray,
                k: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched query: returns (indices (P, k) padded with -1,
    distances (P, k) padded with inf, per-point candidate totals (P,))."""
    if k < 1:
        raise ValueError("k must be >= 1")
    _check_fresh(index, gset)
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    p = xs.shape[0]
    out_idx = np.empty((p, k), dtype=np.int64)
    out_d2 = np.empty((p, k), dtype=np.float64)
    out_total = np.empty(p, dtype=np.int64)
    _kernels.query_points(
        index.node_min, index.node_max, index.left, index.right,
        index.first, index.count, index.order,
        gset.means, index.radii_sq, xs, k, out_idx, out_d2, out_total)
    return out_idx, np.sqrt(out_d2), out_total


def query(index: ProximityIndex, gset: GaussianSet, x: np.ndarray,
          k: int) -> NeighborResult:
    """k nearest Gaussians whose confidence sphere contains ``x``.

    Sorted by ascending mean distance, ties broken by ascending index.
    Raises :class:`StaleIndexError` when the index predates the set's epoch.
    """
    idx, dist, total = query_batch(
        index, gset, np.asarray(x, dtype=np.float64)[None, :], k)
    m = int(min(total[0], k))
    result = NeighborResult(
        indices=idx[0, :m].copy(),
        distances=dist[0, :m].copy(),
        overflowed=bool(total[0] > k),
    )
    if __debug__:
        d = np.linalg.norm(gset.means[result.indices] - x, axis=1) \
            if m else np.zeros(0)
        assert (d <= index.radii[result.indices] + 0.0).all(), \
            "unsound neighbor: sphere does not contain the query point"
    return result


def brute_force_query(gset: GaussianSet, x: np.ndarray, k: int,
                      quantile: float,
                      raw_eigenvalue_radius: bool = False) -> NeighborResult:
    """Full-scan reference with identical semantics to :func:`query`."""
    if k < 1:
        raise ValueError("k must be >= 1")
    x = np.asarray(x, dtype=np.float64)
    radii = effective_radii(gset, quantile, raw_eigenvalue_radius)
    diff = gset.means - x
    d2 = diff[:, 0] * diff[:, 0] + diff[:, 1] * diff[:, 1] \
        + diff[:, 2] * diff[:, 2]
    inside = np.flatnonzero(d2 <= radii * radii)
    order = np.lexsort((inside, d2[inside]))
    chosen = inside[order][:k]
    return NeighborResult(
        indices=chosen.astype(np.int64),
        distances=np.sqrt(d2[chosen]),
        overflowed=bool(inside.size > k),
    )
