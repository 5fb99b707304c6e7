import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from splatfield.hashgrid import (
    HASH_PRIMES,
    HashGridConfig,
    HashGridParams,
    encode,
    encode_backward,
    encode_batch,
    hash_index,
)


def small_config(**overrides):
    defaults = dict(levels=4, base_resolution=4, per_level_scale=1.6,
                    table_size=2 ** 10, features_per_level=2,
                    bounds_min=(0.0, 0.0, 0.0), bounds_max=(1.0, 1.0, 1.0))
    defaults.update(overrides)
    return HashGridConfig(**defaults)


def oracle_encode(x, params, config):
    """Straight-line trilinear interpolation, lerp axis by axis.

    Independent of the vectorized corner-product implementation: indexes
    vertices one at a time and nests three explicit lerps.
    """
    lo = np.asarray(config.bounds_min)
    hi = np.asarray(config.bounds_max)
    p = np.clip((np.asarray(x, dtype=np.float64) - lo) / (hi - lo), 0.0, 1.0)
    out = []
    for level in range(config.levels):
        res = config.resolutions[level]
        s = p * res
        cx = min(int(np.floor(s[0])), res - 1)
        cy = min(int(np.floor(s[1])), res - 1)
        cz = min(int(np.floor(s[2])), res - 1)
        fx, fy, fz = s[0] - cx, s[1] - cy, s[2] - cz

        def vert(ix, iy, iz):
            return params.tables[level][
                hash_index((ix, iy, iz), level, config)]

        c00 = vert(cx, cy, cz) * (1 - fx) + vert(cx + 1, cy, cz) * fx
        c10 = vert(cx, cy + 1, cz) * (1 - fx) + vert(cx + 1, cy + 1, cz) * fx
        c01 = vert(cx, cy, cz + 1) * (1 - fx) + vert(cx + 1, cy, cz + 1) * fx
        c11 = vert(cx, cy + 1, cz + 1) * (1 - fx) \
            + vert(cx + 1, cy + 1, cz + 1) * fx
        c0 = c00 * (1 - fy) + c10 * fy
        c1 = c01 * (1 - fy) + c11 * fy
        out.append(c0 * (1 - fz) + c1 * fz)
    return np.concatenate(out)


class TestHashIndex:
    def test_origin_is_zero_everywhere(self):
        config = small_config()
        for level in range(config.levels):
            assert hash_index((0, 0, 0), level, config) == 0
        hashed = small_config(base_resolution=64, table_size=2 ** 8)
        assert hash_index((0, 0, 0), 0, hashed) == 0

    def test_dense_row_major(self):
        config = small_config(base_resolution=4)
        assert config.level_is_dense(0)
        assert hash_index((1, 2, 3), 0, config) == 1 + 2 * 5 + 3 * 25

    def test_hashed_matches_prime_xor(self):
        config = small_config(base_resolution=64, table_size=2 ** 8)
        assert not config.level_is_dense(0)
        cell = (13, 7, 50)
        expected = (13 * HASH_PRIMES[0]
                    ^ 7 * HASH_PRIMES[1]
                    ^ 50 * HASH_PRIMES[2]) & (2 ** 8 - 1)
        assert hash_index(cell, 0, config) == expected

    def test_hashed_indices_spread_uniformly(self, rng):
        scipy_stats = pytest.importorskip("scipy.stats")
        config = small_config(base_resolution=512, table_size=2 ** 8)
        cells = rng.integers(0, 512, size=(10000, 3))
        idx = np.array([hash_index(c, 0, config) for c in cells])
        counts = np.bincount(idx, minlength=config.table_size)
        result = scipy_stats.chisquare(counts)
        assert result.pvalue > 0.01

    @given(st.integers(0, 500), st.integers(0, 500), st.integers(0, 500))
    @settings(max_examples=50, deadline=None)
    def test_deterministic_and_in_range(self, x, y, z):
        config = small_config(base_resolution=256, table_size=2 ** 9)
        a = hash_index((x, y, z), 0, config)
        assert a == hash_index((x, y, z), 0, config)
        assert 0 <= a < config.table_size

    def test_level_out_of_range(self):
        config = small_config(levels=2)
        with pytest.raises(ValueError, match="level"):
            hash_index((0, 0, 0), 5, config)


class TestEncode:
    def test_vertex_query_exact(self, rng):
        config = small_config()
        params = HashGridParams.init(config, rng, scale=0.5)
        # Vertex (1, 2, 3) of the coarsest (dense, resolution 4) level.
        x = np.array([1.0, 2.0, 3.0]) / 4.0
        out = encode(x, params, config)
        f = config.features_per_level
        expected = params.tables[0][hash_index((1, 2, 3), 0, config)]
        np.testing.assert_array_equal(out[:f], expected)

    def test_edge_midpoint_is_mean(self, rng):
        config = small_config(levels=1)
        params = HashGridParams.init(config, rng, scale=0.5)
        x = np.array([1.5 / 4.0, 2.0 / 4.0, 3.0 / 4.0])
        out = encode(x, params, config)
        a = params.tables[0][hash_index((1, 2, 3), 0, config)]
        b = params.tables[0][hash_index((2, 2, 3), 0, config)]
        np.testing.assert_allclose(out, (a + b) / 2.0, atol=1e-15)

    def test_matches_independent_oracle(self, rng):
        config = small_config(levels=5, base_resolution=3,
                              per_level_scale=1.9, table_size=2 ** 7)
        params = HashGridParams.init(config, rng, scale=1.0)
        xs = rng.uniform(0, 1, size=(50, 3))
        got = encode_batch(xs, params, config)
        want = np.array([oracle_encode(x, params, config) for x in xs])
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_out_of_bounds_clamps(self, rng):
        config = small_config()
        params = HashGridParams.init(config, rng)
        np.testing.assert_array_equal(
            encode(np.array([-5.0, 0.5, 0.5]), params, config),
            encode(np.array([0.0, 0.5, 0.5]), params, config))

    def test_non_finite_rejected(self, rng):
        config = small_config()
        params = HashGridParams.init(config, rng)
        with pytest.raises(ValueError):
            encode(np.array([np.nan, 0.0, 0.0]), params, config)

    def test_linearity_in_tables(self, rng):
        config = small_config()
        p1 = HashGridParams.init(config, rng, scale=1.0)
        p2 = HashGridParams.init(config, rng, scale=1.0)
        a, b = 0.7, -1.3
        mixed = HashGridParams(a * p1.tables + b * p2.tables)
        xs = rng.uniform(0, 1, size=(20, 3))
        lhs = encode_batch(xs, mixed, config)
        rhs = a * encode_batch(xs, p1, config) \
            + b * encode_batch(xs, p2, config)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)

    def test_lipschitz_bound(self, rng):
        config = small_config()
        params = HashGridParams.init(config, rng, scale=1.0)
        for _ in range(50):
            x = rng.uniform(0, 1, size=3)
            y = x + rng.uniform(-0.05, 0.05, size=3)
            y = np.clip(y, 0, 1)
            diff = np.abs(encode(x, params, config)
                          - encode(y, params, config)).max()
            bound = sum(
                config.resolutions[l] * np.abs(params.tables[l]).max()
                for l in range(config.levels)) * np.abs(x - y).sum()
            assert diff <= bound + 1e-12


def interior_points(rng, config, n, margin=1e-3):
    """Random points at least `margin` (in cell units) away from every
    cell face at every level, so finite differences never cross a kink."""
    out = []
    while len(out) < n:
        x = rng.uniform(0.05, 0.95, size=3)
        ok = True
        for res in config.resolutions:
            frac = x * res - np.floor(x * res)
            if (frac < margin).any() or (frac > 1 - margin).any():
                ok = False
                break
        if ok:
            out.append(x)
    return np.array(out)


class TestEncodeBackward:
    def test_zero_upstream(self, rng):
        config = small_config()
        params = HashGridParams.init(config, rng)
        grads, gx = encode_backward(
            np.array([0.3, 0.4, 0.5]), params, config,
            np.zeros(config.output_dim))
        assert (gx == 0).all()
        assert grads.to_dense(config).any() == False  # noqa: E712

    def test_vertex_puts_full_gradient_on_row(self, rng):
        config = small_config(levels=1)
        params = HashGridParams.init(config, rng)
        x = np.array([1.0, 2.0, 3.0]) / 4.0
        up = np.array([1.0, 2.0])
        grads, _ = encode_backward(x, params, config, up)
        dense = grads.to_dense(config)
        row = hash_index((1, 2, 3), 0, config)
        np.testing.assert_allclose(dense[0][row], up, atol=1e-15)
        dense[0][row] = 0.0
        np.testing.assert_allclose(dense, 0.0, atol=1e-15)

    def test_param_gradient_matches_fd(self, rng):
        config = small_config(levels=2, table_size=2 ** 6,
                              base_resolution=3)
        params = HashGridParams.init(config, rng, scale=0.3)
        x = interior_points(rng, config, 1)[0]
        up = rng.normal(size=config.output_dim)
        grads, _ = encode_backward(x, params, config, up)
        dense = grads.to_dense(config)
        h = 1e-4
        rows = np.argwhere(np.abs(dense).sum(axis=2) > 0)
        assert len(rows) > 0
        for level, row in rows[:10]:
            for fidx in range(config.features_per_level):
                bumped = params.copy()
                bumped.tables[level, row, fidx] += h
                lowered = params.copy()
                lowered.tables[level, row, fidx] -= h
                fd = (up @ encode(x, bumped, config)
                      - up @ encode(x, lowered, config)) / (2 * h)
                np.testing.assert_allclose(
                    dense[level, row, fidx], fd, rtol=1e-4, atol=1e-9)

    def test_point_gradient_matches_fd(self, rng):
        config = small_config(levels=3, base_resolution=3,
                              per_level_scale=1.7, table_size=2 ** 8)
        params = HashGridParams.init(config, rng, scale=0.3)
        h = 1e-4
        for x in interior_points(rng, config, 5, margin=1e-2):
            up = rng.normal(size=config.output_dim)
            _, gx = encode_backward(x, params, config, up)
            for d in range(3):
                e = np.zeros(3)
                e[d] = h
                fd = (up @ encode(x + e, params, config)
                      - up @ encode(x - e, params, config)) / (2 * h)
                np.testing.assert_allclose(gx[d], fd, rtol=1e-4, atol=1e-8)

    def test_first_order_roundtrip(self, rng):
        # Applying the sparse parameter gradient as an update moves the
        # encoding in the upstream direction, to first order.
        config = small_config(levels=2, table_size=2 ** 6)
        params = HashGridParams.init(config, rng, scale=0.3)
        x = interior_points(rng, config, 1)[0]
        up = rng.normal(size=config.output_dim)
        grads, _ = encode_backward(x, params, config, up)
        dense = grads.to_dense(config)
        eps = 1e-6
        stepped = HashGridParams(params.tables + eps * dense)
        delta = up @ (encode(x, stepped, config) - encode(x, params, config))
        # <up, d encode> = eps * ||grad||^2
        np.testing.assert_allclose(
            delta, eps * (dense ** 2).sum(), rtol=1e-6)
