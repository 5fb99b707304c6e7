"""Optimization loop: photometric loss, Adam, densification, pruning.

One logical thread owns all mutable state. Every step draws its batch and
stratification jitter from an rng derived from (seed, step), so training is
a pure function of (config, dataset, seed) and an interrupted run resumed
from a checkpoint (which carries the optimizer moments and the visited
bookkeeping) reproduces the uninterrupted run bit for bit.

Gaussian means and log-scales mutate on every step they are trainable, so
the proximity index is rebuilt at the next step boundary; queries within a
step all use the step-start snapshot.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from .encoding import (
    EncodingConfig,
    bake_features,
    build_index_for,
    encode_points_backward,
)
from .hashgrid import encode_batch
from .proximity import ProximityIndex
from .render import render_backward, render_rays
from .sceneio import DatasetManifest, SceneBundle, save_checkpoint
from .scene import camera_ray_arrays

logger = logging.getLogger("splatfield.trainer")


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class DensifyConfig:
    interval_steps: int = 500
    start_step: int = 500
    end_step: int | None = None       # defaults to steps // 2
    max_new_per_cycle: int = 10000
    alpha_threshold: float = 0.5      # insert only above this opacity
    spatial_threshold: float = 0.001  # and farther than this from any mean

    def __post_init__(self):
        if not 0.0 < self.alpha_threshold < 1.0:
            raise ValueError("alpha_threshold must be in (0, 1)")
        if self.spatial_threshold <= 0.0:
            raise ValueError("spatial_threshold must be positive")


@dataclass
class PruneConfig:
    interval_steps: int = 1000
    decay: float = 0.001              # confidence loss when unvisited
    growth: float = 0.01              # confidence gain when visited
    confidence_threshold: float = 0.1
    additive: bool = True             # False: multiply by decay/growth

    def __post_init__(self):
        if not 0.0 < self.confidence_threshold < 1.0:
            raise ValueError("confidence_threshold must be in (0, 1)")


@dataclass
class TrainConfig:
    steps: int = 20000
    rays_per_batch: int = 128
    samples_per_ray: int = 40
    lr_net: float = 1e-3
    lr_grid: float = 1e-2
    lr_means: float = 1e-4
    lr_log_scales: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    learnable_means: bool = True
    learnable_scales: bool = True
    init_log_scale: float = float(np.log(1e-4))
    densify: DensifyConfig = field(default_factory=DensifyConfig)
    prune: PruneConfig = field(default_factory=PruneConfig)
    rebuild_index_every_steps: int = 1
    seed: int = 0
    checkpoint_interval: int = 0      # 0: only the final checkpoint
    log_interval: int = 100

    def __post_init__(self):
        if self.densify.end_step is not None \
                and self.densify.end_step > self.steps:
            raise ValueError("densify end_step cannot exceed total steps")

    def densify_end(self) -> int:
        return self.steps // 2 if self.densify.end_step is None \
            else self.densify.end_step


class AdamState:
    """Per-group Adam moments with lazy (touched rows only) table updates."""

    def __init__(self, beta1: float, beta2: float, eps: float):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def ensure(self, name: str, shape: tuple[int, ...]) -> None:
        if name not in self.m:
            self.m[name] = np.zeros(shape)
            self.v[name] = np.zeros(shape)

    def _corrections(self) -> tuple[float, float]:
        return (1.0 - self.beta1 ** self.t, 1.0 - self.beta2 ** self.t)

    def update_dense(self, name: str, param: np.ndarray, grad: np.ndarray,
                     lr: float) -> None:
        self.ensure(name, param.shape)
        m, v = self.m[name], self.v[name]
        m *= self.beta1
        m += (1.0 - self.beta1) * grad
        v *= self.beta2
        v += (1.0 - self.beta2) * grad * grad
        c1, c2 = self._corrections()
        param -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def update_rows(self, name: str, param: np.ndarray, rows: np.ndarray,
                    row_grads: np.ndarray, lr: float) -> None:
        """Sparse Adam on table rows: untouched rows keep stale moments."""
        self.ensure(name, param.shape)
        m, v = self.m[name], self.v[name]
        m[rows] = self.beta1 * m[rows] + (1.0 - self.beta1) * row_grads
        v[rows] = self.beta2 * v[rows] \
            + (1.0 - self.beta2) * row_grads * row_grads
        c1, c2 = self._corrections()
        param[rows] -= lr * (m[rows] / c1) / (np.sqrt(v[rows] / c2) + self.eps)

    def resize_rows(self, name: str, n_new: int) -> None:
        """Append zero-moment rows for freshly inserted Gaussians."""
        for store in (self.m, self.v):
            if name in store:
                old = store[name]
                store[name] = np.concatenate(
                    [old, np.zeros((n_new,) + old.shape[1:])])

    def compact_rows(self, name: str, keep: np.ndarray) -> None:
        for store in (self.m, self.v):
            if name in store:
                store[name] = store[name][keep]

    def export_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, store in (("m", self.m), ("v", self.v)):
            for name, arr in store.items():
                out[f"{prefix}/{name}"] = arr
        return out

    def import_arrays(self, arrays: dict[str, np.ndarray], t: int) -> None:
        self.t = t
        for key, arr in arrays.items():
            prefix, name = key.split("/", 1)
            store = self.m if prefix == "m" else self.v
            store[name] = np.array(arr)


@dataclass
class StepArtifacts:
    """Per-step sampling leftovers reused by densification."""

    positions: np.ndarray    # (B, S, 3)
    alphas: np.ndarray       # (B, S)
    loss: float
    frame_indices: np.ndarray


class Trainer:
    """Owns the scene bundle plus the optimizer and visit bookkeeping."""

    def __init__(self, config: TrainConfig, dataset: DatasetManifest,
                 bundle: SceneBundle):
        if len(dataset) == 0:
            raise ValueError("dataset is empty")
        self.config = config
        self.dataset = dataset
        self.bundle = bundle
        self.adam = AdamState(config.adam_beta1, config.adam_beta2,
                              config.adam_eps)
        self.visited = np.zeros(len(bundle.gset), dtype=bool)
        self.step = 0
        self.index: ProximityIndex | None = None
        self._ray_cache = [camera_ray_arrays(dataset.camera(i))
                           for i in range(len(dataset))]
        self._pixels = np.stack(
            [f.image.reshape(-1, 3) for f in dataset.frames])
        if bundle.trainer_state is not None:
            self._restore(bundle.trainer_state)

    # -- persistence -------------------------------------------------------

    def _restore(self, state: dict) -> None:
        self.step = int(state["step"])
        self.adam.import_arrays(state["arrays"], int(state["step"]))
        self.adam.t = int(state.get("adam_t", state["step"]))
        visited = state.get("visited", [])
        self.visited = np.zeros(len(self.bundle.gset), dtype=bool)
        self.visited[np.asarray(visited, dtype=np.int64)] = True

    def snapshot_state(self) -> dict:
        return {
            "step": self.step,
            "adam_t": self.adam.t,
            "arrays": self.adam.export_arrays(),
            "visited": np.flatnonzero(self.visited).tolist(),
        }

    # -- plumbing ----------------------------------------------------------

    def _step_rng(self, step: int) -> np.random.Generator:
        seq = np.random.SeedSequence(self.config.seed, spawn_key=(step,))
        return np.random.default_rng(seq)

    def _ensure_index(self) -> None:
        if self.index is None \
                or self.index.built_epoch != self.bundle.gset.epoch:
            self.index = build_index_for(self.bundle.gset,
                                         self.bundle.enc_config)

    def _sample_batch(self, rng: np.random.Generator):
        n_frames = len(self.dataset)
        per_frame = self.dataset.width * self.dataset.height
        flat = rng.integers(0, n_frames * per_frame,
                            size=self.config.rays_per_batch)
        frames = flat // per_frame
        pix = flat % per_frame
        origins = np.empty((flat.size, 3))
        dirs = np.empty((flat.size, 3))
        gt = np.empty((flat.size, 3))
        for f in np.unique(frames):
            sel = frames == f
            o, d = self._ray_cache[f]
            origins[sel] = o[pix[sel]]
            dirs[sel] = d[pix[sel]]
            gt[sel] = self._pixels[f][pix[sel]]
        return origins, dirs, gt, frames

    # -- the step ----------------------------------------------------------

    def train_step(self) -> StepArtifacts:
        cfg = self.config
        self._ensure_index()
        rng = self._step_rng(self.step)
        origins, dirs, gt, frames = self._sample_batch(rng)
        jitter = rng.random((origins.shape[0], cfg.samples_per_ray))

        pixels, _, cache = render_rays(
            origins, dirs, self.dataset.near, self.dataset.far,
            self.bundle.gset, self.index, self.bundle.grid_params,
            self.bundle.grid_config, self.bundle.net,
            self.bundle.enc_config, cfg.samples_per_ray,
            self.dataset.background, jitter=jitter, want_cache=True)
        loss = float(((pixels - gt) ** 2).mean())
        if not np.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss at step {self.step}; "
                f"frames in batch: {np.unique(frames).tolist()}")

        d_pixels = 2.0 * (pixels - gt) / pixels.size
        net_grads, d_feats = render_backward(cache, self.bundle.net, d_pixels)
        enc_grads = encode_points_backward(
            cache.encoding, self.bundle.gset, self.bundle.grid_params,
            self.bundle.grid_config, self.bundle.enc_config, d_feats)

        touched = cache.encoding.uniq
        if touched.size:
            self.visited[touched] = True

        self.adam.t += 1
        if cfg.lr_net > 0:
            for name, grad in net_grads.items():
                self.adam.update_dense(f"net/{name}",
                                       self.bundle.net.params[name],
                                       grad, cfg.lr_net)
        if cfg.lr_grid > 0:
            for level, (idx, rows) in enumerate(enc_grads.grid.levels):
                if idx.size == 0:
                    continue
                uniq, inv = np.unique(idx, return_inverse=True)
                summed = np.zeros((uniq.size, rows.shape[1]))
                np.add.at(summed, inv, rows)
                self.adam.update_rows(
                    f"grid/{level}", self.bundle.grid_params.tables[level],
                    uniq, summed, cfg.lr_grid)

        gset = self.bundle.gset
        means_trained = cfg.learnable_means and cfg.lr_means > 0
        scales_trained = cfg.learnable_scales and cfg.lr_log_scales > 0
        if means_trained:
            self.adam.update_dense("means", gset.means, enc_grads.d_means,
                                   cfg.lr_means)
        if scales_trained:
            self.adam.update_dense("log_scales", gset.log_scales,
                                   enc_grads.d_log_scales,
                                   cfg.lr_log_scales)
        if means_trained or scales_trained:
            gset.bump_epoch()   # parameter drift invalidates the index

        artifacts = StepArtifacts(
            positions=cache.encoding.xs.reshape(
                origins.shape[0], cfg.samples_per_ray, 3),
            alphas=cache.comp.alphas, loss=loss, frame_indices=frames)
        self.step += 1
        return artifacts

    # -- densification and pruning ------------------------------------------

    def densify(self, artifacts: StepArtifacts) -> int:
        """Insert Gaussians at each cached ray's opacity peak, subject to
        the opacity threshold, a minimum spacing from every existing mean
        (including ones inserted this cycle), and the per-cycle cap."""
        cfg = self.config.densify
        gset = self.bundle.gset
        j = np.argmax(artifacts.alphas, axis=1)
        rows = np.arange(artifacts.alphas.shape[0])
        peak_alpha = artifacts.alphas[rows, j]
        peak_pos = artifacts.positions[rows, j]
        candidates = peak_pos[peak_alpha > cfg.alpha_threshold]

        added: list[np.ndarray] = []
        means = gset.means
        tau2 = cfg.spatial_threshold ** 2
        for pos in candidates:
            if len(added) >= cfg.max_new_per_cycle:
                break
            d2 = ((means - pos) ** 2).sum(axis=1).min() if len(means) else np.inf
            if added:
                d2 = min(d2, ((np.asarray(added) - pos) ** 2)
                         .sum(axis=1).min())
            if d2 > tau2:
                added.append(pos)
        if not added:
            return 0
        new_means = np.asarray(added)
        n_new = new_means.shape[0]
        new_feats = encode_batch(new_means, self.bundle.grid_params,
                                 self.bundle.grid_config)
        gset.means = np.concatenate([gset.means, new_means])
        gset.log_scales = np.concatenate(
            [gset.log_scales,
             np.full((n_new, 3), self.config.init_log_scale)])
        gset.features = np.concatenate([gset.features, new_feats])
        gset.confidences = np.concatenate([gset.confidences, np.ones(n_new)])
        gset.bump_epoch()
        self.visited = np.concatenate(
            [self.visited, np.zeros(n_new, dtype=bool)])
        self.adam.resize_rows("means", n_new)
        self.adam.resize_rows("log_scales", n_new)
        return n_new

    def prune(self) -> int:
        """Update confidences from the visit bitset, then drop the cold."""
        cfg = self.config.prune
        gset = self.bundle.gset
        c = gset.confidences
        if cfg.additive:
            updated = np.where(self.visited,
                               np.minimum(1.0, c + cfg.growth),
                               np.maximum(0.0, c - cfg.decay))
        else:
            updated = np.where(self.visited,
                               np.minimum(1.0, c * cfg.growth),
                               np.maximum(0.0, c * cfg.decay))
        gset.confidences = updated
        keep = updated >= cfg.confidence_threshold
        removed = int((~keep).sum())
        if removed == len(gset):
            logger.warning(
                "prune would remove every Gaussian at step %d; skipping "
                "removal (confidences updated)", self.step)
            self.visited[:] = False
            gset.bump_epoch()
            return 0
        if removed:
            gset.means = gset.means[keep]
            gset.log_scales = gset.log_scales[keep]
            gset.features = gset.features[keep]
            gset.confidences = gset.confidences[keep]
            self.adam.compact_rows("means", keep)
            self.adam.compact_rows("log_scales", keep)
            self.visited = self.visited[keep]
        gset.bump_epoch()    # confidence vector changed either way
        self.visited[:] = False
        return removed


def run_training(config: TrainConfig, dataset: DatasetManifest,
                 bundle: SceneBundle, out_path=None,
                 on_step=None) -> SceneBundle:
    """Run the full schedule; bake features and checkpoint at the end.

    Resumes from ``bundle.trainer_state`` when present. Deterministic for a
    fixed (config, dataset, seed): rerunning or resuming reproduces the
    final parameters bitwise. ``on_step(step, loss)`` is a read-only
    observation hook (progress bars, loss recording).
    """
    trainer = Trainer(config, dataset, bundle)
    densify_end = config.densify_end()
    while trainer.step < config.steps:
        step = trainer.step
        artifacts = trainer.train_step()
        if on_step is not None:
            on_step(step, artifacts.loss)
        did_densify = 0
        if (config.densify.start_step <= step <= densify_end
                and config.densify.interval_steps > 0
                and step % config.densify.interval_steps == 0):
            did_densify = trainer.densify(artifacts)
        if config.prune.interval_steps > 0 and step > 0 \
                and step % config.prune.interval_steps == 0:
            trainer.prune()
        if config.log_interval and step % config.log_interval == 0:
            psnr = -10.0 * np.log10(max(artifacts.loss, 1e-12))
            logger.info("step=%d loss=%.6f gaussians=%d psnr=%.2f",
                        step, artifacts.loss, len(bundle.gset), psnr)
            if did_densify:
                logger.info("densified: +%d gaussians", did_densify)
        if out_path is not None and config.checkpoint_interval > 0 \
                and trainer.step % config.checkpoint_interval == 0 \
                and trainer.step < config.steps:
            bundle.trainer_state = trainer.snapshot_state()
            save_checkpoint(bundle, out_path)

    bake_features(bundle.gset, bundle.grid_params, bundle.grid_config)
    bundle.enc_config = dataclasses.replace(bundle.enc_config, mode="baked")
    bundle.train_config = config
    bundle.trainer_state = trainer.snapshot_state()
    if out_path is not None:
        save_checkpoint(bundle, out_path)
    return bundle
