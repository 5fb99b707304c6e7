"""Property suites runnable against a live checkpoint.

Each check returns a result record instead of raising, so the CLI can
print a pass/fail table and exit nonzero if anything failed. The suites
mirror the repository tests but run against whatever scene the user loads:
proximity queries against the full-scan oracle, dropped-neighbor error
bounds, and finite-difference spot checks of every gradient path.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .encoding import (
    EncodingConfig,
    build_index_for,
    encode_points,
    encode_points_backward,
    verify_drop_bound,
)
from .field import field_backward_batch, field_forward_batch
from .hashgrid import encode, encode_backward
from .proximity import ProximityIndex, brute_force_query, query
from .sceneio import SceneBundle


@dataclass
class VerifyResult:
    name: str
    passed: bool
    detail: str

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name}: {self.detail}"


def verify_proximity_oracle(bundle: SceneBundle, rng: np.random.Generator,
                            n_queries: int = 200,
                            ks: tuple[int, ...] = (1, 4, 16),
                            index: ProximityIndex | None = None
                            ) -> VerifyResult:
    """Tree queries must equal the full scan exactly (set, order, overflow)
    and every returned neighbor must actually contain the query point."""
    gset = bundle.gset
    if index is None:
        index = build_index_for(gset, bundle.enc_config)
    quantile = index.quantile
    lo = gset.means.min(axis=0) - 0.2
    hi = gset.means.max(axis=0) + 0.2
    mismatches = 0
    unsound = 0
    checked = 0
    for _ in range(n_queries):
        x = rng.uniform(lo, hi)
        for k in ks:
            checked += 1
            try:
                got = query(index, gset, x, k)
            except AssertionError:
                unsound += 1
                continue
            want = brute_force_query(gset, x, k, quantile,
                                     index.raw_eigenvalue_radius)
            if not (np.array_equal(got.indices, want.indices)
                    and np.array_equal(got.distances, want.distances)
                    and got.overflowed == want.overflowed):
                mismatches += 1
            d = np.linalg.norm(gset.means[got.indices] - x, axis=1)
            if (d > index.radii[got.indices]).any():
                unsound += 1
    ok = mismatches == 0 and unsound == 0
    return VerifyResult(
        "proximity-oracle-equivalence", ok,
        f"{checked} queries, {mismatches} oracle mismatches, "
        f"{unsound} soundness violations")


def verify_drop_bound_trials(bundle: SceneBundle, rng: np.random.Generator,
                             trials: int = 300,
                             epsilons: tuple[float, ...] = (1e-1, 1e-2, 1e-3)
                             ) -> VerifyResult:
    """Randomized dropped-neighbor trials; the deviation must stay under
    epsilon in every trial that satisfies the distance precondition."""
    gset = bundle.gset
    grid_params = bundle.grid_params
    grid_config = bundle.grid_config
    use_grid = not gset.baked or not gset.features.any()
    lo = gset.means.min(axis=0)
    hi = gset.means.max(axis=0)
    violations = 0
    held = 0
    for t in range(trials):
        x = rng.uniform(lo, hi)
        eps = float(epsilons[t % len(epsilons)])
        size = int(rng.integers(1, min(len(gset), 32) + 1))
        drop = rng.choice(len(gset), size=size, replace=False)
        kwargs = dict(grid_params=grid_params, grid_config=grid_config) \
            if use_grid else {}
        report = verify_drop_bound(x, gset, drop, eps, **kwargs)
        kept = drop[report.drop_distances > report.threshold]
        if kept.size == 0:
            continue
        final = verify_drop_bound(x, gset, kept, eps, **kwargs)
        if not final.holds:
            continue
        held += 1
        if (final.deviation >= eps).any():
            violations += 1
    return VerifyResult(
        "drop-bound", violations == 0,
        f"{held} qualifying trials, {violations} bound violations")


def _fd_close(analytic: float, numeric: float, rtol: float = 1e-3,
              atol: float = 1e-6) -> bool:
    return abs(analytic - numeric) <= atol + rtol * abs(numeric)


def verify_gradients(bundle: SceneBundle, rng: np.random.Generator,
                     h: float = 1e-5) -> VerifyResult:
    """Finite-difference spot checks on the grid, the field network, and
    the full point-encoding path (always exercised in live mode)."""
    grid_params = bundle.grid_params
    grid_config = bundle.grid_config
    gset = bundle.gset
    failures: list[str] = []

    # Grid parameter and query-point gradients at interior points.
    lo = np.asarray(grid_config.bounds_min)
    hi = np.asarray(grid_config.bounds_max)
    for _ in range(3):
        x = rng.uniform(lo + 0.05 * (hi - lo), hi - 0.05 * (hi - lo))
        norm = (x - lo) / (hi - lo)
        fracs = np.concatenate([norm * res - np.floor(norm * res)
                                for res in grid_config.resolutions])
        if (fracs < 0.01).any() or (fracs > 0.99).any():
            continue   # too close to a trilinear kink for clean FD
        up = rng.normal(size=grid_config.output_dim)
        grads, gx = encode_backward(x, grid_params, grid_config, up)
        for d in range(3):
            e = np.zeros(3)
            e[d] = h
            fd = (up @ encode(x + e, grid_params, grid_config)
                  - up @ encode(x - e, grid_params, grid_config)) / (2 * h)
            if not _fd_close(gx[d], fd):
                failures.append(f"grid point grad axis {d}")
        dense_level, (idx, rows) = 0, grads.levels[0]
        row = int(idx[0])
        dense = np.zeros(grid_config.features_per_level)
        for i, r in zip(idx, rows):
            if i == row:
                dense += r
        orig = grid_params.tables[dense_level, row, 0]
        grid_params.tables[dense_level, row, 0] = orig + h
        up_val = up @ encode(x, grid_params, grid_config)
        grid_params.tables[dense_level, row, 0] = orig - h
        down_val = up @ encode(x, grid_params, grid_config)
        grid_params.tables[dense_level, row, 0] = orig
        if not _fd_close(dense[0], (up_val - down_val) / (2 * h)):
            failures.append("grid table grad")

    # Field network parameters and feature inputs.
    net = bundle.net
    feats = rng.normal(size=(4, net.feature_dim))
    dirs = rng.normal(size=(4, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    d_color = rng.normal(size=(4, 3))
    d_sigma = rng.normal(size=4)

    def net_loss():
        c, s, _ = field_forward_batch(feats, dirs, net)
        return float((c * d_color).sum() + (s * d_sigma).sum())

    _, _, cache = field_forward_batch(feats, dirs, net)
    grads, d_feats = field_backward_batch(cache, net, d_color, d_sigma)
    for name in ("w0", "w_sigma", "w_c1"):
        flat = net.params[name].reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        flat[i] = orig + h
        up_val = net_loss()
        flat[i] = orig - h
        down_val = net_loss()
        flat[i] = orig
        if not _fd_close(grads[name].reshape(-1)[i],
                         (up_val - down_val) / (2 * h)):
            failures.append(f"field grad {name}")

    # Point-encoding gradients (live mode) on a small neighborhood.
    live = dataclasses.replace(bundle.enc_config, mode="live")
    probe = gset.means[:2] + rng.uniform(-0.005, 0.005, size=(2, 3))
    up = rng.normal(size=(2, grid_config.output_dim))

    def enc_loss():
        idx = build_index_for(gset, live)
        b = encode_points(probe, gset, idx, grid_params, grid_config, live)
        return float((b.features * up).sum())

    idx = build_index_for(gset, live)
    batch = encode_points(probe, gset, idx, grid_params, grid_config, live)
    enc_grads = encode_points_backward(batch, gset, grid_params,
                                       grid_config, live, up)
    target = int(batch.idx[batch.idx >= 0].reshape(-1)[0])
    for arr, grad, label in ((gset.means, enc_grads.d_means, "mean"),
                             (gset.log_scales, enc_grads.d_log_scales,
                              "logScale")):
        orig = arr[target, 0]
        arr[target, 0] = orig + h
        up_val = enc_loss()
        arr[target, 0] = orig - h
        down_val = enc_loss()
        arr[target, 0] = orig
        if not _fd_close(grad[target, 0], (up_val - down_val) / (2 * h)):
            failures.append(f"encoding grad {label}")

    return VerifyResult(
        "gradient-fd-spot-checks", not failures,
        "all finite-difference checks passed" if not failures
        else "failed: " + ", ".join(failures))


def run_suite(bundle: SceneBundle, seed: int = 0,
              trials: int = 300) -> list[VerifyResult]:
    rng = np.random.default_rng(seed)
    return [
        verify_proximity_oracle(bundle, rng),
        verify_drop_bound_trials(bundle, rng, trials=trials),
        verify_gradients(bundle, rng),
    ]
