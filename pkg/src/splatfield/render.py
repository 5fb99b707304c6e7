"""Volumetric rendering: ray sampling, compositing, full images, backward.

Sampling is uniform or stratified over [t_near, t_far]; compositing is the
standard front-to-back accumulation with a configurable constant background.
The forward keeps exp(-sigma * delta) around so the backward never divides
by (1 - alpha). Images render in row chunks against immutable scene
snapshots; chunks write disjoint output rows, so the result is identical
for any thread count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field

import numpy as np

from .encoding import BatchEncoding, EncodingConfig, encode_points
from .field import (
    FieldCache,
    FieldNetwork,
    field_backward_batch,
    field_forward_batch,
)
from .hashgrid import HashGridConfig, HashGridParams
from .proximity import ProximityIndex
from .scene import Camera, GaussianSet, Ray, camera_ray_arrays


@dataclass
class RenderConfig:
    n_samples: int = 64
    stratified: bool = False
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    threads: int = 1
    rows_per_chunk: int = 16


@dataclass
class RaySample:
    """One sample along a ray. ``alpha`` derives from sigma and delta
    unless given explicitly (useful for analytic test cases)."""

    t: float
    position: np.ndarray
    delta: float
    sigma: float = 0.0
    color: np.ndarray = dataclass_field(
        default_factory=lambda: np.zeros(3))
    feature: object = None
    alpha: float | None = None

    def __post_init__(self):
        if self.delta <= 0:
            raise ValueError("sample spacing must be positive")
        if self.alpha is None:
            self.alpha = 1.0 - float(np.exp(-self.sigma * self.delta))


def sample_bins(t_near: float, t_far: float, n: int,
                jitter: np.ndarray | None = None
                ) -> tuple[np.ndarray, np.ndarray]:
    """Sample positions and spacings for rays sharing one [t_near, t_far].

    ``jitter`` is (P, n) in [0, 1): offsets within each uniform bin. Without
    it every ray gets the bin starts, so the t values cover [t_near, t_far)
    and the spacings sum exactly to the interval length.
    """
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    span = t_far - t_near
    base = np.arange(n, dtype=np.float64)
    if jitter is None:
        offsets = base[None, :]
        p = 1
    else:
        offsets = base[None, :] + jitter
        p = jitter.shape[0]
    ts = t_near + span * offsets / n
    deltas = np.empty((p, n))
    deltas[:, :-1] = np.diff(ts, axis=1)
    deltas[:, -1] = t_far - ts[:, -1]
    if jitter is None:
        ts = np.broadcast_to(ts, (1, n))
    return ts, deltas


def sample_ray(ray: Ray, n_samples: int, stratified: bool,
               rng: np.random.Generator | None = None
               ) -> tuple[np.ndarray, np.ndarray]:
    """Per-ray sampling; stratified mode jitters within uniform bins."""
    jitter = None
    if stratified:
        if rng is None:
            raise ValueError("stratified sampling needs an rng")
        jitter = rng.random((1, n_samples))
    ts, deltas = sample_bins(ray.t_near, ray.t_far, n_samples, jitter)
    return ts[0].copy(), deltas[0].copy()


def composite(samples: list[RaySample],
              background: tuple[float, float, float] = (1.0, 1.0, 1.0)
              ) -> tuple[np.ndarray, float]:
    """Reference scalar compositor over t-ordered samples."""
    t_acc = 1.0
    pixel = np.zeros(3)
    for s in samples:
        pixel = pixel + t_acc * s.alpha * np.asarray(s.color, dtype=np.float64)
        t_acc = t_acc * (1.0 - s.alpha)
    pixel = pixel + t_acc * np.asarray(background, dtype=np.float64)
    return pixel, 1.0 - t_acc


@dataclass
class CompositeCache:
    trans: np.ndarray       # (P, S+1) transmittance before each sample
    survive: np.ndarray     # (P, S) exp(-sigma * delta)
    alphas: np.ndarray      # (P, S)
    colors: np.ndarray      # (P, S, 3)
    deltas: np.ndarray      # (P, S)
    background: np.ndarray  # (3,)


def composite_batch(sigmas: np.ndarray, colors: np.ndarray,
                    deltas: np.ndarray,
                    background: tuple[float, float, float]
                    ) -> tuple[np.ndarray, np.ndarray, CompositeCache]:
    """Front-to-back compositing for (P, S) sample grids."""
    survive = np.exp(-sigmas * deltas)
    alphas = 1.0 - survive
    p, s = sigmas.shape
    trans = np.empty((p, s + 1))
    trans[:, 0] = 1.0
    np.cumprod(survive, axis=1, out=trans[:, 1:])
    weights = trans[:, :-1] * alphas
    bg = np.asarray(background, dtype=np.float64)
    pixels = np.einsum("ps,psc->pc", weights, colors) + trans[:, -1:] * bg
    acc = 1.0 - trans[:, -1]
    return pixels, acc, CompositeCache(trans, survive, alphas, colors,
                                       deltas, bg)


def composite_backward(cache: CompositeCache, d_pixels: np.ndarray
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the pixel colors w.r.t. per-sample sigma and color.

    d pixel / d sigma_i = delta_i * (T_{i+1} c_i - R_{i+1}) where R_{i+1}
    is the radiance contributed after sample i (background included).
    """
    d_pixels = np.asarray(d_pixels, dtype=np.float64)
    weights = cache.trans[:, :-1] * cache.alphas            # (P, S)
    d_colors = weights[:, :, None] * d_pixels[:, None, :]

    contrib = weights[:, :, None] * cache.colors            # (P, S, 3)
    suffix = np.zeros_like(contrib)
    tail = cache.trans[:, -1:][:, :, None] * cache.background[None, None, :]
    rev = np.cumsum(contrib[:, ::-1, :], axis=1)[:, ::-1, :]
    suffix[:, :-1, :] = rev[:, 1:, :]
    suffix = suffix + tail
    inner = cache.trans[:, 1:, None] * cache.colors - suffix
    d_sigmas = cache.deltas * np.einsum("psc,pc->ps", inner, d_pixels)
    return d_sigmas, d_colors


@dataclass
class RenderCache:
    """Everything needed to backpropagate a batch of rendered rays."""

    encoding: BatchEncoding
    field: FieldCache
    comp: CompositeCache
    n_rays: int
    n_samples: int


def render_rays(
    origins: np.ndarray,
    dirs: np.ndarray,
    t_near: float,
    t_far: float,
    gset: GaussianSet,
    index: ProximityIndex | None,
    grid_params: HashGridParams | None,
    grid_config: HashGridConfig | None,
    net: FieldNetwork,
    enc_config: EncodingConfig,
    n_samples: int,
    background: tuple[float, float, float],
    jitter: np.ndarray | None = None,
    want_cache: bool = False,
) -> tuple[np.ndarray, np.ndarray, RenderCache | None]:
    """Render a batch of rays; the workhorse behind images and training."""
    p = origins.shape[0]
    if len(gset) == 0:
        bg = np.asarray(background, dtype=np.float64)
        return np.tile(bg, (p, 1)), np.zeros(p), None
    ts, deltas = sample_bins(t_near, t_far, n_samples, jitter)
    if ts.shape[0] == 1 and p > 1:
        ts = np.broadcast_to(ts, (p, n_samples))
        deltas = np.broadcast_to(deltas, (p, n_samples))
    positions = origins[:, None, :] + ts[:, :, None] * dirs[:, None, :]
    flat_pos = positions.reshape(-1, 3)
    benc = encode_points(flat_pos, gset, index, grid_params, grid_config,
                         enc_config)
    flat_dirs = np.repeat(dirs, n_samples, axis=0)
    colors, sigmas, fcache = field_forward_batch(
        benc.features, flat_dirs, net, benc.empty)
    pixels, acc, ccache = composite_batch(
        sigmas.reshape(p, n_samples),
        colors.reshape(p, n_samples, 3),
        np.ascontiguousarray(deltas), background)
    cache = RenderCache(benc, fcache, ccache, p, n_samples) \
        if want_cache else None
    return pixels, acc, cache


def render_backward(cache: RenderCache, net: FieldNetwork,
                    d_pixels: np.ndarray
                    ) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Composite and field backward; returns net grads and d(features).

    The feature gradient feeds :func:`splatfield.encoding.encode_points_backward`,
    which finishes the chain into the grid tables and Gaussian parameters.
    """
    d_sigmas, d_colors = composite_backward(cache.comp, d_pixels)
    flat = cache.n_rays * cache.n_samples
    net_grads, d_features = field_backward_batch(
        cache.field, net,
        d_colors.reshape(flat, 3), d_sigmas.reshape(flat))
    return net_grads, d_features


def stratified_jitter(rng: np.random.Generator, n_rays: int,
                      n_samples: int) -> np.ndarray:
    return rng.random((n_rays, n_samples))


def render_image(
    camera: Camera,
    gset: GaussianSet,
    index: ProximityIndex | None,
    grid_params: HashGridParams | None,
    grid_config: HashGridConfig | None,
    net: FieldNetwork,
    enc_config: EncodingConfig,
    config: RenderConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Render the full camera image. Returns float RGB (H, W, 3) in [0, 1]
    and accumulated alpha (H, W). Deterministic for a fixed seed; thread
    count never changes the output (chunks own disjoint rows)."""
    origins, dirs = camera_ray_arrays(camera)
    h, w = camera.height, camera.width
    n = config.n_samples
    jitter_all = None
    if config.stratified:
        rng = np.random.default_rng(config.seed)
        jitter_all = stratified_jitter(rng, h * w, n)

    rgb = np.empty((h * w, 3))
    acc = np.empty(h * w)

    def run_chunk(row0: int, row1: int):
        sl = slice(row0 * w, row1 * w)
        jit = jitter_all[sl] if jitter_all is not None else None
        pix, a, _ = render_rays(
            origins[sl], dirs[sl], camera.near, camera.far, gset, index,
            grid_params, grid_config, net, enc_config, n,
            config.background, jitter=jit)
        rgb[sl] = pix
        acc[sl] = a

    bounds = list(range(0, h, config.rows_per_chunk)) + [h]
    chunks = [(bounds[i], min(bounds[i] + config.rows_per_chunk, h))
              for i in range(len(bounds) - 1) if bounds[i] < h]
    if config.threads > 1:
        with ThreadPoolExecutor(max_workers=config.threads) as pool:
            list(pool.map(lambda c: run_chunk(*c), chunks))
    else:
        for c in chunks:
            run_chunk(*c)
    return rgb.reshape(h, w, 3), acc.reshape(h, w)


def image_psnr(a: np.ndarray, b: np.ndarray) -> float:
    """PSNR between two float images in [0, 1]."""
    mse = float(np.mean((np.asarray(a) - np.asarray(b)) ** 2))
    if mse == 0:
        return float("inf")
    return -10.0 * np.log10(mse)
