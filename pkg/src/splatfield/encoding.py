"""Point features as Mahalanobis-weighted sums over nearby Gaussians.

A query point's feature is the weighted sum of per-Gaussian features over
its proximity neighbors, weighted by exp(-d_M^2 / 2) under each neighbor's
diagonal covariance. The weights are deliberately NOT normalized to sum
to one: the dropped-neighbor error bound (see :func:`verify_drop_bound`)
holds only for the plain weighted sum, and the decaying total weight is
the renderer's density cue for empty space.

Two feature sources exist. ``live`` samples the hash grid at each
neighbor's current mean and is the training mode: grid tables and Gaussian
parameters receive gradients jointly. ``baked`` reads the per-Gaussian
feature vector frozen by :func:`bake_features` and is the editing mode:
a moved Gaussian carries its appearance instead of resampling the grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .hashgrid import (
    HashGridConfig,
    HashGridGrads,
    HashGridParams,
    encode_backward_batch,
    encode_batch,
)
from .proximity import ProximityIndex, build_index, query_batch
from .scene import Gaussian, GaussianSet


@dataclass(frozen=True)
class EncodingConfig:
    k: int = 16                  # neighbor budget per query point
    quantile: float = 2.0        # confidence-sphere quantile Q
    mode: str = "live"           # "live" (train) or "baked" (edit)
    raw_eigenvalue_radius: bool = False

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.quantile <= 0:
            raise ValueError("quantile must be positive")
        if self.mode not in ("live", "baked"):
            raise ValueError(f"mode must be 'live' or 'baked', got {self.mode!r}")


def build_index_for(gset: GaussianSet, config: EncodingConfig) -> ProximityIndex:
    return build_index(gset, config.quantile, config.raw_eigenvalue_radius)


def mahalanobis_sq(x: np.ndarray, mean: np.ndarray,
                   log_scale: np.ndarray) -> float:
    """Squared Mahalanobis distance under a diagonal covariance."""
    diff = np.asarray(x, dtype=np.float64) - mean
    return float((diff * diff / np.exp(log_scale)).sum())


def mahalanobis_weight(x: np.ndarray, g: Gaussian) -> float:
    """exp(-d_M^2 / 2); equals 1 at the mean, decays with distance."""
    return float(np.exp(-0.5 * mahalanobis_sq(x, g.mean, g.log_scale)))


@dataclass
class PointEncoding:
    feature: np.ndarray            # (F,) weighted feature sum
    neighbor_indices: np.ndarray   # (m,) ascending mean distance
    neighbor_distances: np.ndarray
    weights: np.ndarray            # (m,) in (0, 1]
    overflowed: bool
    empty: bool                    # no sphere contained the point


@dataclass
class BatchEncoding:
    """Forward results plus everything the backward pass reuses."""

    features: np.ndarray      # (P, F)
    idx: np.ndarray           # (P, k) neighbor indices, -1 padded
    weights: np.ndarray       # (P, k), 0 on padding
    totals: np.ndarray        # (P,) candidate counts before truncation
    empty: np.ndarray         # (P,) bool
    xs: np.ndarray            # (P, 3) query points
    uniq: np.ndarray          # (U,) unique neighbor Gaussian ids
    gaussian_features: np.ndarray  # (U, F) per-unique-Gaussian features
    slot_feat: np.ndarray     # (P, k, F) gathered features, 0 on padding
    diff: np.ndarray          # (P, k, 3) x - mean per slot
    var: np.ndarray           # (P, k, 3) slot variances
    mask: np.ndarray          # (P, k) valid-slot mask


def _batch_weights(xs, idx, gset):
    """Mahalanobis weights for padded neighbor slots; 0 where idx < 0."""
    mask = idx >= 0
    safe = np.where(mask, idx, 0)
    diff = xs[:, None, :] - gset.means[safe]              # (P, k, 3)
    var = np.exp(gset.log_scales[safe])
    m2 = (diff * diff / var).sum(axis=2)
    return np.exp(-0.5 * m2) * mask, diff, var, mask


def encode_points(xs: np.ndarray, gset: GaussianSet, index: ProximityIndex,
                  grid_params: HashGridParams | None,
                  grid_config: HashGridConfig | None,
                  config: EncodingConfig) -> BatchEncoding:
    """Encode (P, 3) query points against a fresh proximity index."""
    xs = np.ascontiguousarray(xs, dtype=np.float64)
    idx, _, totals = query_batch(index, gset, xs, config.k)
    mask = idx >= 0
    uniq = np.unique(idx[mask]) if mask.any() else np.zeros(0, dtype=np.int64)

    safe = np.where(mask, idx, 0)
    if config.mode == "live":
        if grid_params is None or grid_config is None:
            raise ValueError("live mode needs hash grid params and config")
        feature_dim = grid_config.output_dim
        if uniq.size:
            uniq_feat = encode_batch(gset.means[uniq], grid_params,
                                     grid_config)
            lookup = np.zeros(max(len(gset), 1), dtype=np.int64)
            lookup[uniq] = np.arange(uniq.size)
            slot_feat = uniq_feat[lookup[safe]]
            slot_feat *= mask[:, :, None]
        else:
            uniq_feat = np.zeros((0, feature_dim))
            slot_feat = np.zeros((xs.shape[0], config.k, feature_dim))
    else:
        feature_dim = gset.feature_dim
        uniq_feat = gset.features[uniq] if uniq.size \
            else np.zeros((0, feature_dim))
        slot_feat = gset.features[safe] * mask[:, :, None]

    weights, diff, var, mask = _batch_weights(xs, idx, gset)
    features = np.einsum("pk,pkf->pf", weights, slot_feat)
    return BatchEncoding(
        features=features, idx=idx, weights=weights, totals=totals,
        empty=totals == 0, xs=xs, uniq=uniq, gaussian_features=uniq_feat,
        slot_feat=slot_feat, diff=diff, var=var, mask=mask)


def encode_point(x: np.ndarray, gset: GaussianSet, index: ProximityIndex,
                 grid_params: HashGridParams | None,
                 grid_config: HashGridConfig | None,
                 config: EncodingConfig) -> PointEncoding:
    """Single-point feature; see :func:`encode_points` for the batch form."""
    batch = encode_points(np.asarray(x, dtype=np.float64)[None, :], gset,
                          index, grid_params, grid_config, config)
    m = int(min(batch.totals[0], config.k))
    idx = batch.idx[0, :m]
    return PointEncoding(
        feature=batch.features[0],
        neighbor_indices=idx.copy(),
        neighbor_distances=np.linalg.norm(gset.means[idx] - x, axis=1),
        weights=batch.weights[0, :m].copy(),
        overflowed=bool(batch.totals[0] > config.k),
        empty=bool(batch.empty[0]),
    )


@dataclass
class EncodingGrads:
    """Gradients of a scalar loss through a batch encoding."""

    grid: HashGridGrads
    d_means: np.ndarray        # (n, 3) dense over the whole set
    d_log_scales: np.ndarray   # (n, 3)


def encode_points_backward(batch: BatchEncoding, gset: GaussianSet,
                           grid_params: HashGridParams,
                           grid_config: HashGridConfig,
                           config: EncodingConfig,
                           upstream: np.ndarray) -> EncodingGrads:
    """Backward through the weighted sum, the weights, and the grid.

    Only live mode is differentiable: baked features are frozen buffers.
    Per neighbor i of point p, the mean gradient has a weight path
    (the Mahalanobis exponent) and a grid path (the trilinear sample moves
    with the mean); log-scales only enter through the weight.
    """
    if config.mode != "live":
        raise ValueError("backward requires live mode; baked features are "
                         "frozen and carry no trainable path")
    upstream = np.asarray(upstream, dtype=np.float64)
    idx = batch.idx
    weights, diff, var, mask = (batch.weights, batch.diff, batch.var,
                                batch.mask)

    # a[p, j] = <upstream_p, feature of neighbor j>
    a = np.einsum("pkf,pf->pk", batch.slot_feat, upstream)
    aw = a * weights
    d_mean_w = aw[:, :, None] * diff / var                 # (P, k, 3)
    d_ls = aw[:, :, None] * 0.5 * diff * diff / var

    n = len(gset)
    d_means = np.zeros((n, 3))
    d_log_scales = np.zeros((n, 3))
    flat = idx[mask]
    np.add.at(d_means, flat, d_mean_w[mask])
    np.add.at(d_log_scales, flat, d_ls[mask])

    # Grid path: each unique neighbor mean was encoded once; its upstream
    # is the weight-scaled sum of the point upstreams that used it.
    uniq = batch.uniq
    if uniq.size:
        up_uniq = np.zeros((uniq.size, upstream.shape[1]))
        lookup = np.zeros(max(n, 1), dtype=np.int64)
        lookup[uniq] = np.arange(uniq.size)
        contrib = weights[mask, None] * upstream[np.nonzero(mask)[0]]
        np.add.at(up_uniq, lookup[flat], contrib)
        grid_grads, d_mean_grid = encode_backward_batch(
            gset.means[uniq], grid_params, grid_config, up_uniq)
        d_means[uniq] += d_mean_grid
    else:
        grid_grads = HashGridGrads()
    return EncodingGrads(grid=grid_grads, d_means=d_means,
                         d_log_scales=d_log_scales)


def encode_point_backward(x: np.ndarray, gset: GaussianSet,
                          index: ProximityIndex,
                          grid_params: HashGridParams,
                          grid_config: HashGridConfig,
                          config: EncodingConfig,
                          upstream: np.ndarray) -> EncodingGrads:
    """Single-point backward; dense per-Gaussian gradient arrays."""
    batch = encode_points(np.asarray(x, dtype=np.float64)[None, :], gset,
                          index, grid_params, grid_config, config)
    return encode_points_backward(batch, gset, grid_params, grid_config,
                                  config, upstream[None, :])


def bake_features(gset: GaussianSet, grid_params: HashGridParams,
                  grid_config: HashGridConfig) -> None:
    """Freeze every Gaussian's feature from the grid at its current mean."""
    gset.features = encode_batch(gset.means, grid_params, grid_config)
    gset.baked = True
    gset.bump_epoch()


@dataclass
class DropBoundReport:
    holds: bool                # every dropped Gaussian is beyond threshold
    threshold: float           # strictest per-coordinate distance bound
    deviation: np.ndarray      # (F,) |full sum - sum without the drop set|
    drop_distances: np.ndarray = field(default_factory=lambda: np.zeros(0))


def verify_drop_bound(x: np.ndarray, gset: GaussianSet,
                      drop_indices: np.ndarray, epsilon: float,
                      grid_params: HashGridParams | None = None,
                      grid_config: HashGridConfig | None = None) -> DropBoundReport:
    """Check the dropped-neighbor error bound on a concrete configuration.

    For each feature coordinate c let S_c be the sum of |feature_i[c]| over
    the dropped set. If every dropped Gaussian is farther (in Mahalanobis
    distance) than sqrt(-2 ln(eps / S_c)), dropping the set changes that
    coordinate of the weighted sum by less than eps. Coordinates with
    S_c <= eps hold trivially (their threshold is 0 and any positive
    distance qualifies).

    The report is evidence, not an assertion: ``holds`` states whether the
    precondition was met, ``deviation`` is the actual change.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    x = np.asarray(x, dtype=np.float64)
    drop = np.asarray(drop_indices, dtype=np.int64)
    feature_dim = grid_config.output_dim if grid_config is not None \
        else gset.feature_dim
    if drop.size == 0:
        return DropBoundReport(True, 0.0, np.zeros(feature_dim))

    if grid_params is not None and grid_config is not None:
        feats = encode_batch(gset.means[drop], grid_params, grid_config)
    else:
        feats = gset.features[drop]
    if not np.isfinite(feats).all():
        raise ValueError("dropped Gaussians must have finite features")

    s = np.abs(feats).sum(axis=0)                          # (F,)
    with np.errstate(divide="ignore"):
        t2 = -2.0 * np.log(epsilon / s)                    # <= 0 when S <= eps
    thresholds = np.sqrt(np.maximum(t2, 0.0))
    thresholds[s == 0.0] = 0.0
    threshold = float(thresholds.max()) if thresholds.size else 0.0

    diff = x - gset.means[drop]
    d_m = np.sqrt((diff * diff / np.exp(gset.log_scales[drop])).sum(axis=1))
    holds = bool((d_m > threshold).all())
    w = np.exp(-0.5 * d_m * d_m)
    deviation = np.abs((w[:, None] * feats).sum(axis=0))
    return DropBoundReport(holds, threshold, deviation, d_m)
