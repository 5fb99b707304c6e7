"""Edit-time manipulation of baked scenes.

Edits move Gaussians (directly or through a driving mesh) and stretch their
diagonal covariances; features, confidences, and the primitive count never
change. Every mutating operation bumps the set epoch exactly once, so the
proximity index and any open render sessions know to refresh.

Mesh binding is the simplified nearest-triangle flavor: with rotations
fixed to identity and diagonal covariances, a full face-frame
reparameterization has nothing to write its rotation into, so bindings
keep barycentric plane coordinates plus a normal offset, and in-plane
stretch lands on the closest world axes. Barycentric coordinates come from
the unclamped plane projection: they can leave [0, 1] when the mean
projects outside its nearest triangle, which is what makes the rest-pose
reconstruction exact.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scene import GaussianSet

logger = logging.getLogger("splatfield.edit")


class EditError(ValueError):
    pass


@dataclass
class Selection:
    """Gaussian subset: explicit indices, a spatial predicate, or all."""

    indices: np.ndarray | None = None
    sphere: tuple[tuple[float, float, float], float] | None = None
    aabb: tuple[tuple[float, float, float],
                tuple[float, float, float]] | None = None
    everything: bool = False

    @classmethod
    def of(cls, indices) -> "Selection":
        return cls(indices=np.asarray(indices, dtype=np.int64))

    @classmethod
    def all(cls) -> "Selection":
        return cls(everything=True)

    @classmethod
    def in_sphere(cls, center, radius: float) -> "Selection":
        return cls(sphere=(tuple(center), float(radius)))

    @classmethod
    def in_aabb(cls, lo, hi) -> "Selection":
        return cls(aabb=(tuple(lo), tuple(hi)))

    def resolve(self, gset: GaussianSet) -> np.ndarray:
        """Sorted unique indices valid for the set's current epoch."""
        if self.everything:
            return np.arange(len(gset), dtype=np.int64)
        if self.indices is not None:
            idx = np.unique(np.asarray(self.indices, dtype=np.int64))
            if idx.size and (idx[0] < 0 or idx[-1] >= len(gset)):
                raise EditError(
                    f"selection index out of range for {len(gset)} Gaussians")
            return idx
        if self.sphere is not None:
            center, radius = self.sphere
            d = np.linalg.norm(gset.means - np.asarray(center), axis=1)
            return np.flatnonzero(d <= radius).astype(np.int64)
        if self.aabb is not None:
            lo, hi = (np.asarray(v, dtype=np.float64) for v in self.aabb)
            inside = ((gset.means >= lo) & (gset.means <= hi)).all(axis=1)
            return np.flatnonzero(inside).astype(np.int64)
        raise EditError("empty selection specification")


def _require_baked(gset: GaussianSet) -> None:
    if not gset.baked:
        raise EditError("edits require a baked scene; run feature baking "
                        "(or train to completion) first")


def apply_transform(gset: GaussianSet, selection: Selection,
                    transform: np.ndarray) -> None:
    """Map selected means through a 4x4 affine; covariances pick up the
    squared per-axis scale magnitudes (columns of the linear block).
    Rotations leave the diagonal untouched by construction."""
    _require_baked(gset)
    transform = np.asarray(transform, dtype=np.float64)
    if transform.shape != (4, 4) or not np.isfinite(transform).all():
        raise EditError("transform must be a finite 4x4 matrix")
    linear = transform[:3, :3]
    if abs(np.linalg.det(linear)) < 1e-12:
        raise EditError("singular transform rejected")
    idx = selection.resolve(gset)
    if idx.size:
        gset.means[idx] = gset.means[idx] @ linear.T + transform[:3, 3]
        axis_scales = np.linalg.norm(linear, axis=0)
        gset.log_scales[idx] += 2.0 * np.log(axis_scales)
    gset.bump_epoch()


def translation(t) -> np.ndarray:
    m = np.eye(4)
    m[:3, 3] = t
    return m


def rotation_about(axis, angle: float, pivot=(0.0, 0.0, 0.0)) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    c, s = np.cos(angle), np.sin(angle)
    rot = np.array([
        [c + x * x * (1 - c), x * y * (1 - c) - z * s, x * z * (1 - c) + y * s],
        [y * x * (1 - c) + z * s, c + y * y * (1 - c), y * z * (1 - c) - x * s],
        [z * x * (1 - c) - y * s, z * y * (1 - c) + x * s, c + z * z * (1 - c)],
    ])
    pivot = np.asarray(pivot, dtype=np.float64)
    m = np.eye(4)
    m[:3, :3] = rot
    m[:3, 3] = pivot - rot @ pivot
    return m


def scaling(factors, pivot=(0.0, 0.0, 0.0)) -> np.ndarray:
    factors = np.broadcast_to(np.asarray(factors, dtype=np.float64), (3,))
    pivot = np.asarray(pivot, dtype=np.float64)
    m = np.eye(4)
    m[:3, :3] = np.diag(factors)
    m[:3, 3] = pivot - factors * pivot
    return m


# ---------------------------------------------------------------------------
# Meshes


@dataclass
class TriMesh:
    vertices: np.ndarray                  # (V, 3) rest pose
    faces: np.ndarray                     # (F, 3) int
    frames: list[np.ndarray] | None = None  # deformation; frame 0 = rest

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise EditError("face index out of range")
        if self.frames is not None:
            for k, fr in enumerate(self.frames):
                if np.asarray(fr).shape != self.vertices.shape:
                    raise EditError(
                        f"frame {k} vertex array does not match the rest pose")

    @property
    def n_frames(self) -> int:
        return len(self.frames) if self.frames is not None else 1

    def frame_vertices(self, frame: int) -> np.ndarray:
        if self.frames is not None:
            if not 0 <= frame < len(self.frames):
                raise EditError(
                    f"frame {frame} out of range ({len(self.frames)} frames)")
            return np.asarray(self.frames[frame], dtype=np.float64)
        if frame != 0:
            raise EditError("mesh has no deformation frames")
        return self.vertices


def load_obj(path: str | Path) -> TriMesh:
    """Minimal OBJ reader: v/f lines, fan-triangulated, 1-based indices."""
    vertices: list[list[float]] = []
    faces: list[list[int]] = []
    for raw in Path(path).read_text().splitlines():
        line = raw.strip()
        if line.startswith("v "):
            parts = line.split()
            vertices.append([float(parts[1]), float(parts[2]),
                             float(parts[3])])
        elif line.startswith("f "):
            idx = [int(tok.split("/")[0]) - 1 for tok in line.split()[1:]]
            for i in range(1, len(idx) - 1):
                faces.append([idx[0], idx[i], idx[i + 1]])
    if not vertices or not faces:
        raise EditError(f"{path}: no usable v/f lines")
    return TriMesh(np.asarray(vertices), np.asarray(faces))


def save_obj(path: str | Path, vertices: np.ndarray,
             faces: np.ndarray) -> None:
    lines = [f"v {float(v[0])!r} {float(v[1])!r} {float(v[2])!r}"
             for v in np.asarray(vertices)]
    lines += [f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}"
              for f in np.asarray(faces)]
    Path(path).write_text("\n".join(lines) + "\n")


def load_mesh_sequence(directory: str | Path) -> TriMesh:
    """Load ``frame_%04d.obj`` files as a deformation sequence; frame 0 is
    the rest pose and every frame must share its topology."""
    directory = Path(directory)
    paths = sorted(p for p in directory.glob("frame_*.obj")
                   if re.fullmatch(r"frame_\d{4}\.obj", p.name))
    if not paths:
        raise EditError(f"no frame_NNNN.obj files in {directory}")
    rest = load_obj(paths[0])
    frames = [rest.vertices]
    for p in paths[1:]:
        mesh = load_obj(p)
        if mesh.vertices.shape != rest.vertices.shape \
                or not np.array_equal(mesh.faces, rest.faces):
            raise EditError(f"{p.name}: topology differs from frame 0")
        frames.append(mesh.vertices)
    return TriMesh(rest.vertices, rest.faces, frames)


def export_triangle_soup(gset: GaussianSet, quantile: float = 1.0) -> TriMesh:
    """One right triangle per Gaussian: centroid at the mean, legs along
    the two largest-variance axes with half-lengths Q * sqrt(variance).
    Variance ties resolve toward the lower axis index."""
    _require_baked(gset)
    n = len(gset)
    variances = np.exp(gset.log_scales)
    order = np.argsort(-variances, axis=1, kind="stable")
    a0, a1 = order[:, 0], order[:, 1]
    rows = np.arange(n)
    h0 = quantile * np.sqrt(variances[rows, a0])
    h1 = quantile * np.sqrt(variances[rows, a1])
    e0 = np.zeros((n, 3))
    e0[rows, a0] = h0
    e1 = np.zeros((n, 3))
    e1[rows, a1] = h1
    v0 = gset.means - (2.0 / 3.0) * (e0 + e1)
    v1 = v0 + 2.0 * e0
    v2 = v0 + 2.0 * e1
    vertices = np.stack([v0, v1, v2], axis=1).reshape(3 * n, 3)
    faces = np.arange(3 * n, dtype=np.int64).reshape(n, 3)
    return TriMesh(vertices, faces)


@dataclass
class MeshBinding:
    """Per-Gaussian attachment to a driving mesh, expressed in rest pose.

    Deformation always re-derives pose from these rest quantities, so the
    result is a pure function of (binding, mesh, frame).
    """

    triangle_index: np.ndarray    # (n,)
    barycentric: np.ndarray       # (n, 3) plane projection; sums to 1
    normal_offset: np.ndarray     # (n,) signed distance / sqrt(rest area)
    rest_edges: np.ndarray        # (n, 2, 3)
    rest_log_scales: np.ndarray   # (n, 3) stretch baseline


def _edge_distance_sq(point, a, b):
    """Squared distance from ``point`` to segments a->b, vectorized."""
    ab = b - a
    denom = (ab * ab).sum(1)
    t = ((point - a) * ab).sum(1) / np.where(denom == 0.0, 1.0, denom)
    t = np.clip(t, 0.0, 1.0)
    q = a + t[:, None] * ab
    return ((q - point) ** 2).sum(1)


def _closest_triangle(point: np.ndarray, vertices: np.ndarray,
                      faces: np.ndarray) -> int:
    """Index of the face minimizing exact point-to-triangle distance.

    Distance is the minimum over the three clamped edge projections and,
    where the plane projection falls inside the face, the plane distance.
    """
    v0 = vertices[faces[:, 0]]
    v1 = vertices[faces[:, 1]]
    v2 = vertices[faces[:, 2]]
    d = np.minimum(_edge_distance_sq(point, v0, v1),
                   np.minimum(_edge_distance_sq(point, v1, v2),
                              _edge_distance_sq(point, v0, v2)))
    e1 = v1 - v0
    e2 = v2 - v0
    w = point - v0
    d00 = (e1 * e1).sum(1)
    d01 = (e1 * e2).sum(1)
    d11 = (e2 * e2).sum(1)
    d20 = (w * e1).sum(1)
    d21 = (w * e2).sum(1)
    denom = d00 * d11 - d01 * d01
    safe = np.where(denom == 0.0, 1.0, denom)
    b1 = (d11 * d20 - d01 * d21) / safe
    b2 = (d00 * d21 - d01 * d20) / safe
    inside = (denom > 0.0) & (b1 >= 0.0) & (b2 >= 0.0) & (b1 + b2 <= 1.0)
    proj = v0 + b1[:, None] * e1 + b2[:, None] * e2
    plane_d = ((proj - point) ** 2).sum(1)
    d = np.where(inside, np.minimum(d, plane_d), d)
    return int(np.argmin(d))


def _plane_barycentric(point: np.ndarray, v0, v1, v2) -> np.ndarray:
    e1 = v1 - v0
    e2 = v2 - v0
    w = point - v0
    d00 = e1 @ e1
    d01 = e1 @ e2
    d11 = e2 @ e2
    d20 = w @ e1
    d21 = w @ e2
    denom = d00 * d11 - d01 * d01
    b1 = (d11 * d20 - d01 * d21) / denom
    b2 = (d00 * d21 - d01 * d20) / denom
    return np.array([1.0 - b1 - b2, b1, b2])


def bind_to_mesh(gset: GaussianSet, mesh: TriMesh) -> MeshBinding:
    """Attach every Gaussian to its nearest mesh triangle (rest pose)."""
    _require_baked(gset)
    if len(mesh.faces) == 0:
        raise EditError("cannot bind to an empty mesh")
    verts = mesh.vertices
    n = len(gset)
    tri = np.empty(n, dtype=np.int64)
    bary = np.empty((n, 3))
    offset = np.empty(n)
    edges = np.empty((n, 2, 3))
    for i in range(n):
        point = gset.means[i]
        t = _closest_triangle(point, verts, mesh.faces)
        v0, v1, v2 = verts[mesh.faces[t]]
        e1, e2 = v1 - v0, v2 - v0
        normal = np.cross(e1, e2)
        area2 = np.linalg.norm(normal)
        if area2 < 1e-24:
            raise EditError(f"rest triangle {t} is degenerate")
        unit_n = normal / area2
        dist = (point - v0) @ unit_n
        tri[i] = t
        bary[i] = _plane_barycentric(point, v0, v1, v2)
        offset[i] = dist / np.sqrt(area2 / 2.0)
        edges[i, 0] = e1
        edges[i, 1] = e2
    return MeshBinding(tri, bary, offset, edges,
                       gset.log_scales.copy())


def deform_from_mesh(gset: GaussianSet, binding: MeshBinding,
                     mesh: TriMesh, frame: int) -> None:
    """Re-pose bound Gaussians from a deformation frame.

    Means follow the barycentric point plus the area-normalized normal
    offset; in-plane stretch multiplies the variances of the world axes
    closest to each rest edge. Gaussians on degenerate (collapsed)
    triangles keep their current pose.
    """
    _require_baked(gset)
    verts = mesh.frame_vertices(frame)
    n_degenerate = 0
    for i in range(len(binding.triangle_index)):
        t = binding.triangle_index[i]
        v0, v1, v2 = verts[mesh.faces[t]]
        e1, e2 = v1 - v0, v2 - v0
        normal = np.cross(e1, e2)
        area2 = np.linalg.norm(normal)
        if area2 / 2.0 < 1e-12:
            n_degenerate += 1
            continue
        unit_n = normal / area2
        b = binding.barycentric[i]
        gset.means[i] = b[0] * v0 + b[1] * v1 + b[2] * v2 \
            + binding.normal_offset[i] * np.sqrt(area2 / 2.0) * unit_n
        rest_e1 = binding.rest_edges[i, 0]
        rest_e2 = binding.rest_edges[i, 1]
        s1 = np.linalg.norm(e1) / np.linalg.norm(rest_e1)
        s2 = np.linalg.norm(e2) / np.linalg.norm(rest_e2)
        axis1 = int(np.argmax(np.abs(rest_e1)))
        remaining = [a for a in range(3) if a != axis1]
        axis2 = remaining[int(np.argmax(np.abs(rest_e2)[remaining]))]
        ls = binding.rest_log_scales[i].copy()
        ls[axis1] += 2.0 * np.log(s1)
        ls[axis2] += 2.0 * np.log(s2)
        gset.log_scales[i] = ls
    if n_degenerate:
        logger.warning("frame %d: %d bound Gaussians frozen on degenerate "
                       "triangles", frame, n_degenerate)
    gset.bump_epoch()
