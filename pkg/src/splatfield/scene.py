"""Core scene types: Gaussian primitives, cameras, and rays.

Gaussians are stored struct-of-arrays inside :class:`GaussianSet` for fast
vectorized access; :class:`Gaussian` is a per-primitive view used by the
scalar entry points and tests. Covariances are diagonal (the rotation is
fixed to identity), parameterized in the log domain so the variance stays
strictly positive under gradient updates.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SceneError(ValueError):
    """Invalid scene input (bad camera, empty set, malformed transform)."""


@dataclass
class Gaussian:
    """View of one primitive. Arrays alias the owning set's storage."""

    mean: np.ndarray        # (3,) world position
    log_scale: np.ndarray   # (3,) log of the diagonal covariance entries
    feature: np.ndarray     # (F,) latent feature, frozen once baked
    confidence: float       # in [0, 1], drives pruning
    baked: bool

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_scale)


class GaussianSet:
    """Ordered, editable collection of Gaussian primitives.

    Mutations must happen in batches: the mutating caller applies its whole
    batch and then calls :meth:`bump_epoch` exactly once. Indices are stable
    between mutations within one epoch. Readers may share a set freely;
    writers need exclusive access.
    """

    def __init__(
        self,
        means: np.ndarray,
        log_scales: np.ndarray,
        features: np.ndarray,
        confidences: np.ndarray,
        baked: bool = False,
        epoch: int = 0,
    ):
        means = np.ascontiguousarray(means, dtype=np.float64)
        log_scales = np.ascontiguousarray(log_scales, dtype=np.float64)
        features = np.ascontiguousarray(features, dtype=np.float64)
        confidences = np.ascontiguousarray(confidences, dtype=np.float64)
        n = means.shape[0]
        if means.shape != (n, 3) or log_scales.shape != (n, 3):
            raise SceneError("means and log_scales must have shape (n, 3)")
        if features.ndim != 2 or features.shape[0] != n:
            raise SceneError("features must have shape (n, F)")
        if confidences.shape != (n,):
            raise SceneError("confidences must have shape (n,)")
        self.means = means
        self.log_scales = log_scales
        self.features = features
        self.confidences = confidences
        self.baked = baked
        self.epoch = epoch

    @classmethod
    def empty(cls, feature_dim: int) -> "GaussianSet":
        return cls(
            np.zeros((0, 3)), np.zeros((0, 3)),
            np.zeros((0, feature_dim)), np.zeros((0,)),
        )

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def gaussian(self, i: int) -> Gaussian:
        return Gaussian(
            mean=self.means[i],
            log_scale=self.log_scales[i],
            feature=self.features[i],
            confidence=float(self.confidences[i]),
            baked=self.baked,
        )

    def __getitem__(self, i: int) -> Gaussian:
        return self.gaussian(i)

    def bump_epoch(self) -> int:
        """Mark the end of one mutation batch. Returns the new epoch."""
        self.epoch += 1
        return self.epoch

    def clone(self) -> "GaussianSet":
        """Deep copy; used for copy-on-write snapshots."""
        return GaussianSet(
            self.means.copy(), self.log_scales.copy(),
            self.features.copy(), self.confidences.copy(),
            baked=self.baked, epoch=self.epoch,
        )

    def variances(self) -> np.ndarray:
        return np.exp(self.log_scales)


@dataclass
class SceneViolation:
    """One invariant violation found by :func:`validate_scene`."""

    index: int          # Gaussian index, or -1 for set-level issues
    field: str
    detail: str

    def __str__(self) -> str:
        return f"gaussian {self.index}: {self.field}: {self.detail}"


def validate_scene(gset: GaussianSet, feature_dim: int) -> list[SceneViolation]:
    """Check every per-Gaussian invariant; violations are data, not errors."""
    out: list[SceneViolation] = []
    if gset.feature_dim != feature_dim:
        out.append(SceneViolation(
            -1, "feature",
            f"feature dim {gset.feature_dim} != expected {feature_dim}"))
    finite_mean = np.isfinite(gset.means).all(axis=1)
    with np.errstate(over="ignore"):
        variances = np.exp(gset.log_scales)
    ok_scale = np.isfinite(gset.log_scales).all(axis=1) & \
        np.isfinite(variances).all(axis=1) & (variances > 0.0).all(axis=1)
    conf = gset.confidences
    ok_conf = np.isfinite(conf) & (conf >= 0.0) & (conf <= 1.0)
    finite_feat = np.isfinite(gset.features).all(axis=1)
    for i in range(len(gset)):
        if not finite_mean[i]:
            out.append(SceneViolation(i, "mean", "non-finite component"))
        if not ok_scale[i]:
            out.append(SceneViolation(
                i, "logScale", "exp(logScale) must be finite and positive"))
        if not ok_conf[i]:
            out.append(SceneViolation(
                i, "confidence", f"{conf[i]} outside [0, 1]"))
        if not finite_feat[i]:
            out.append(SceneViolation(i, "feature", "non-finite component"))
    return out


@dataclass
class Camera:
    """Pinhole camera. ``pose`` maps camera to world; the camera looks down
    its local -z axis with +y up (the convention of transforms-JSON datasets).
    """

    pose: np.ndarray    # (4, 4) rigid camera-to-world
    focal: float        # pixels
    width: int
    height: int
    near: float
    far: float

    def __post_init__(self):
        self.pose = np.asarray(self.pose, dtype=np.float64)

    def validate(self) -> None:
        if self.pose.shape != (4, 4) or not np.isfinite(self.pose).all():
            raise SceneError("camera pose must be a finite 4x4 matrix")
        r = self.pose[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise SceneError("camera pose rotation block is not orthonormal")
        if not np.allclose(self.pose[3], [0.0, 0.0, 0.0, 1.0], atol=1e-9):
            raise SceneError("camera pose bottom row must be (0, 0, 0, 1)")
        if self.focal <= 0:
            raise SceneError(f"focal must be positive, got {self.focal}")
        if self.width < 1 or self.height < 1:
            raise SceneError("image dimensions must be at least 1x1")
        if not self.near < self.far:
            raise SceneError(f"near ({self.near}) must be < far ({self.far})")

    @property
    def position(self) -> np.ndarray:
        return self.pose[:3, 3]


@dataclass
class Ray:
    origin: np.ndarray      # (3,)
    direction: np.ndarray   # (3,) unit length
    t_near: float
    t_far: float


def camera_ray_arrays(camera: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel ray origins and unit directions, row-major, as arrays.

    Rays pass through pixel centers (i + 0.5, j + 0.5). Deterministic:
    equal cameras produce bitwise-equal arrays.
    """
    camera.validate()
    w, h, f = camera.width, camera.height, camera.focal
    i = np.arange(w, dtype=np.float64) + 0.5
    j = np.arange(h, dtype=np.float64) + 0.5
    x = (i - w / 2.0) / f
    y = -(j - h / 2.0) / f
    xg, yg = np.meshgrid(x, y)              # (h, w), row-major
    dirs_cam = np.stack(
        [xg, yg, -np.ones_like(xg)], axis=-1).reshape(-1, 3)
    rot = camera.pose[:3, :3]
    dirs = dirs_cam @ rot.T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.position, dirs.shape).copy()
    return origins, dirs


def generate_camera_rays(camera: Camera) -> list[Ray]:
    """One ray per pixel through the pixel center, row-major order."""
    origins, dirs = camera_ray_arrays(camera)
    return [
        Ray(origins[k], dirs[k], camera.near, camera.far)
        for k in range(origins.shape[0])
    ]


def transform_points(transform: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply a 4x4 affine transform to (n, 3) points."""
    transform = np.asarray(transform, dtype=np.float64)
    return points @ transform[:3, :3].T + transform[:3, 3]
