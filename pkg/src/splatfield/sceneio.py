"""Persistence and ingestion: checkpoints, datasets, toy scenes, configs.

Checkpoints are little-endian binary files made of length-prefixed,
CRC32-guarded sections behind a versioned header; a round trip reproduces
every array bitwise. Datasets follow the transforms-JSON convention
(camera_angle_x plus per-frame camera-to-world matrices). The toy-scene
generator renders ground truth with its own analytic density integrator,
deliberately sharing no code with the neural renderer so it can act as an
independent oracle for end-to-end tests.
"""

from __future__ import annotations

import dataclasses
import io
import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Optional

import numpy as np
from PIL import Image

from .encoding import EncodingConfig
from .field import PARAM_NAMES, FieldNetwork
from .hashgrid import HashGridConfig, HashGridParams
from .scene import Camera, GaussianSet

if TYPE_CHECKING:  # avoid a runtime import cycle with the trainer
    from .trainer import TrainConfig

MAGIC = b"SPFC"
VERSION = 1


class CheckpointError(RuntimeError):
    """Base class for checkpoint load failures."""


class TruncatedCheckpointError(CheckpointError):
    pass


class ChecksumError(CheckpointError):
    pass


class VersionError(CheckpointError):
    pass


class DatasetError(RuntimeError):
    pass


@dataclass
class SceneBundle:
    """Everything the renderer, trainer, and service operate on."""

    gset: GaussianSet
    grid_config: HashGridConfig
    grid_params: HashGridParams
    net: FieldNetwork
    enc_config: EncodingConfig
    train_config: Optional["TrainConfig"] = None
    trainer_state: dict | None = None


def _dataclass_to_dict(obj) -> dict:
    return dataclasses.asdict(obj)


def dataclass_from_dict(cls, data: dict):
    """Rebuild a (possibly nested) dataclass from plain dicts, coercing
    JSON lists back to the tuples the dataclasses declare."""
    import typing

    hints = typing.get_type_hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data[f.name]
        ftype = hints.get(f.name, f.type)
        if dataclasses.is_dataclass(ftype) and isinstance(value, dict):
            value = dataclass_from_dict(ftype, value)
        elif isinstance(value, list):
            value = tuple(value)
        kwargs[f.name] = value
    return cls(**kwargs)


def _array_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def _read_array(payload: bytes, shape: tuple[int, ...]) -> np.ndarray:
    expected = int(np.prod(shape)) * 8
    if len(payload) != expected:
        raise TruncatedCheckpointError(
            f"array section holds {len(payload)} bytes, expected {expected}")
    return np.frombuffer(payload, dtype="<f8").reshape(shape).astype(
        np.float64)


def _pack_sections(sections: list[tuple[bytes, bytes]]) -> bytes:
    out = io.BytesIO()
    out.write(MAGIC)
    out.write(struct.pack("<II", VERSION, len(sections)))
    for tag, payload in sections:
        out.write(tag)
        out.write(struct.pack("<Q", len(payload)))
        out.write(payload)
        out.write(struct.pack("<I", zlib.crc32(payload)))
    return out.getvalue()


def _unpack_sections(blob: bytes) -> dict[bytes, bytes]:
    if len(blob) < 12:
        raise TruncatedCheckpointError("file shorter than the header")
    if blob[:4] != MAGIC:
        raise CheckpointError("bad magic; not a scene checkpoint")
    version, count = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise VersionError(
            f"checkpoint version {version} not supported (expected {VERSION})")
    sections: dict[bytes, bytes] = {}
    pos = 12
    for _ in range(count):
        if pos + 12 > len(blob):
            raise TruncatedCheckpointError("section header cut short")
        tag = blob[pos:pos + 4]
        (length,) = struct.unpack("<Q", blob[pos + 4:pos + 12])
        pos += 12
        if pos + length + 4 > len(blob):
            raise TruncatedCheckpointError(
                f"section {tag.decode()} payload cut short")
        payload = blob[pos:pos + length]
        pos += length
        (crc,) = struct.unpack("<I", blob[pos:pos + 4])
        pos += 4
        if zlib.crc32(payload) != crc:
            raise ChecksumError(f"section {tag.decode()} failed its checksum")
        sections[tag] = payload
    return sections


def _trainer_state_payload(state: dict) -> bytes:
    arrays: list[tuple[str, np.ndarray]] = []
    meta: dict = {"step": state["step"], "arrays": []}
    for name, arr in state["arrays"].items():
        arr = np.asarray(arr, dtype=np.float64)
        meta["arrays"].append({"name": name, "shape": list(arr.shape)})
        arrays.append((name, arr))
    if "visited" in state:
        meta["visited"] = state["visited"]
    head = json.dumps(meta).encode()
    return struct.pack("<I", len(head)) + head + b"".join(
        _array_bytes(a) for _, a in arrays)


def _parse_trainer_state(payload: bytes) -> dict:
    (hlen,) = struct.unpack("<I", payload[:4])
    meta = json.loads(payload[4:4 + hlen].decode())
    pos = 4 + hlen
    arrays = {}
    for entry in meta["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 8
        arrays[entry["name"]] = _read_array(
            payload[pos:pos + nbytes], shape)
        pos += nbytes
    state = {"step": meta["step"], "arrays": arrays}
    if "visited" in meta:
        state["visited"] = meta["visited"]
    return state


def save_checkpoint(bundle: SceneBundle, path: str | Path) -> None:
    """Write the bundle; the load is a bitwise inverse."""
    gset = bundle.gset
    meta = {
        "gaussian_count": len(gset),
        "feature_dim": gset.feature_dim,
        "epoch": gset.epoch,
        "baked": gset.baked,
        "grid_config": _dataclass_to_dict(bundle.grid_config),
        "enc_config": _dataclass_to_dict(bundle.enc_config),
        "train_config": (_dataclass_to_dict(bundle.train_config)
                         if bundle.train_config is not None else None),
        "net": {
            "feature_dim": bundle.net.feature_dim,
            "hidden": bundle.net.hidden,
            "direction_frequencies": bundle.net.direction_frequencies,
            "shapes": {k: list(v.shape) for k, v in bundle.net.params.items()},
        },
    }
    sections = [
        (b"META", json.dumps(meta, sort_keys=True).encode()),
        (b"GMEA", _array_bytes(gset.means)),
        (b"GLSC", _array_bytes(gset.log_scales)),
        (b"GFEA", _array_bytes(gset.features)),
        (b"GCON", _array_bytes(gset.confidences)),
        (b"GRID", _array_bytes(bundle.grid_params.tables)),
        (b"NETW", b"".join(_array_bytes(bundle.net.params[k])
                           for k in PARAM_NAMES)),
    ]
    if bundle.trainer_state is not None:
        sections.append((b"TRST",
                         _trainer_state_payload(bundle.trainer_state)))
    Path(path).write_bytes(_pack_sections(sections))


def load_checkpoint(path: str | Path) -> SceneBundle:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    sections = _unpack_sections(blob)
    for tag in (b"META", b"GMEA", b"GLSC", b"GFEA", b"GCON", b"GRID",
                b"NETW"):
        if tag not in sections:
            raise TruncatedCheckpointError(
                f"missing section {tag.decode()}")
    meta = json.loads(sections[b"META"].decode())
    n = meta["gaussian_count"]
    fdim = meta["feature_dim"]
    gset = GaussianSet(
        _read_array(sections[b"GMEA"], (n, 3)),
        _read_array(sections[b"GLSC"], (n, 3)),
        _read_array(sections[b"GFEA"], (n, fdim)),
        _read_array(sections[b"GCON"], (n,)),
        baked=meta["baked"], epoch=meta["epoch"],
    )
    grid_config = dataclass_from_dict(HashGridConfig, meta["grid_config"])
    tables = _read_array(
        sections[b"GRID"],
        (grid_config.levels, grid_config.table_size,
         grid_config.features_per_level))
    enc_config = dataclass_from_dict(EncodingConfig, meta["enc_config"])

    shapes = meta["net"]["shapes"]
    payload = sections[b"NETW"]
    params = {}
    pos = 0
    for name in PARAM_NAMES:
        shape = tuple(shapes[name])
        nbytes = int(np.prod(shape)) * 8
        params[name] = _read_array(payload[pos:pos + nbytes], shape)
        pos += nbytes
    net = FieldNetwork(params, meta["net"]["feature_dim"],
                       meta["net"]["hidden"],
                       meta["net"]["direction_frequencies"])

    train_config = None
    if meta.get("train_config") is not None:
        from .trainer import TrainConfig
        train_config = dataclass_from_dict(TrainConfig, meta["train_config"])

    trainer_state = None
    if b"TRST" in sections:
        trainer_state = _parse_trainer_state(sections[b"TRST"])

    return SceneBundle(gset, grid_config, HashGridParams(tables), net,
                       enc_config, train_config, trainer_state)


# ---------------------------------------------------------------------------
# Images


def save_image_png(path: str | Path, rgb: np.ndarray,
                   acc: np.ndarray | None = None) -> None:
    """Write a float [0, 1] image as 8-bit PNG; RGBA when acc is given."""
    rgb8 = np.clip(np.round(np.asarray(rgb) * 255.0), 0, 255).astype(np.uint8)
    if acc is not None:
        a8 = np.clip(np.round(np.asarray(acc) * 255.0), 0, 255
                     ).astype(np.uint8)
        rgba = np.concatenate([rgb8, a8[:, :, None]], axis=2)
        Image.fromarray(rgba, mode="RGBA").save(path)
    else:
        Image.fromarray(rgb8, mode="RGB").save(path)


def load_image(path: str | Path,
               background: tuple[float, float, float] | None = (1.0, 1.0, 1.0)
               ) -> np.ndarray:
    """Load a PNG to float RGB; alpha composites over the background."""
    img = Image.open(path)
    arr = np.asarray(img, dtype=np.float64) / 255.0
    if arr.ndim == 2:
        arr = np.stack([arr] * 3, axis=2)
    if arr.shape[2] == 4:
        rgb, alpha = arr[:, :, :3], arr[:, :, 3:4]
        if background is None:
            return rgb
        bg = np.asarray(background, dtype=np.float64)
        return rgb * alpha + bg * (1.0 - alpha)
    return arr[:, :, :3]


def save_raw_dump(path: str | Path, rgb: np.ndarray, acc: np.ndarray) -> None:
    """Lossless float dump: u32 width, u32 height, then RGBA float32 LE."""
    h, w = rgb.shape[:2]
    rgba = np.concatenate([rgb, acc[:, :, None]], axis=2).astype("<f4")
    with open(path, "wb") as f:
        f.write(struct.pack("<II", w, h))
        f.write(rgba.tobytes())


def load_raw_dump(path: str | Path) -> tuple[np.ndarray, np.ndarray]:
    blob = Path(path).read_bytes()
    w, h = struct.unpack("<II", blob[:8])
    rgba = np.frombuffer(blob[8:], dtype="<f4").reshape(h, w, 4)
    return rgba[:, :, :3].astype(np.float64), rgba[:, :, 3].astype(np.float64)


# ---------------------------------------------------------------------------
# Datasets


@dataclass
class DatasetFrame:
    image_path: str
    pose: np.ndarray            # (4, 4) camera-to-world
    image: np.ndarray | None = None   # (H, W, 3) float in [0, 1]


@dataclass
class DatasetManifest:
    frames: list[DatasetFrame]
    width: int
    height: int
    focal: float
    near: float = 2.0
    far: float = 6.0
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def camera(self, i: int) -> Camera:
        return Camera(pose=self.frames[i].pose, focal=self.focal,
                      width=self.width, height=self.height,
                      near=self.near, far=self.far)

    def __len__(self) -> int:
        return len(self.frames)


def focal_from_fov(fov_x: float, width: int) -> float:
    return 0.5 * width / np.tan(0.5 * fov_x)


def load_dataset(manifest_path: str | Path,
                 background: tuple[float, float, float] = (1.0, 1.0, 1.0)
                 ) -> DatasetManifest:
    """Load a transforms-JSON dataset with decoded, composited images."""
    manifest_path = Path(manifest_path)
    try:
        spec = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DatasetError(f"cannot parse manifest {manifest_path}: {exc}") \
            from exc
    if "camera_angle_x" not in spec or "frames" not in spec:
        raise DatasetError(
            f"{manifest_path} lacks camera_angle_x/frames keys")
    root = manifest_path.parent
    frames: list[DatasetFrame] = []
    width = height = None
    for k, entry in enumerate(spec["frames"]):
        rel = entry.get("file_path", "")
        img_path = root / rel
        if img_path.suffix == "":
            img_path = img_path.with_suffix(".png")
        if not img_path.exists():
            raise DatasetError(f"frame {k}: image {img_path} does not exist")
        matrix = np.asarray(entry.get("transform_matrix"), dtype=np.float64)
        if matrix.shape != (4, 4) or not np.isfinite(matrix).all():
            raise DatasetError(f"frame {k}: malformed transform_matrix")
        image = load_image(img_path, background)
        if width is None:
            height, width = image.shape[:2]
        elif image.shape[:2] != (height, width):
            raise DatasetError(
                f"frame {k}: image size {image.shape[:2]} differs from "
                f"({height}, {width})")
        frames.append(DatasetFrame(str(img_path), matrix, image))
    if not frames:
        raise DatasetError(f"{manifest_path} lists no frames")
    focal = focal_from_fov(float(spec["camera_angle_x"]), width)
    return DatasetManifest(
        frames=frames, width=width, height=height, focal=focal,
        near=float(spec.get("near", 2.0)), far=float(spec.get("far", 6.0)),
        background=background)


# ---------------------------------------------------------------------------
# Toy scenes


@dataclass
class ToySceneSpec:
    n_blobs: int = 3
    n_cameras: int = 8
    resolution: int = 64
    camera_distance: float = 2.6
    fov_x: float = 0.8
    blob_spread: float = 0.45       # blob centers inside this radius
    blob_sigma: tuple[float, float] = (0.16, 0.24)
    density_amplitude: float = 60.0
    near: float = 1.0
    far: float = 4.5
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    march_steps: int = 256


_PALETTE = np.array([
    [0.85, 0.20, 0.15],
    [0.15, 0.55, 0.85],
    [0.95, 0.75, 0.10],
    [0.20, 0.75, 0.35],
    [0.70, 0.25, 0.80],
    [0.90, 0.45, 0.10],
])


def _ring_pose(angle: float, distance: float, tilt: float = 0.35
               ) -> np.ndarray:
    """Camera on a tilted ring, looking at the origin (-z forward, +y up)."""
    eye = np.array([np.cos(angle) * distance * np.cos(tilt),
                    np.sin(tilt) * distance,
                    np.sin(angle) * distance * np.cos(tilt)])
    forward = -eye / np.linalg.norm(eye)
    world_up = np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, world_up)
    right /= np.linalg.norm(right)
    up = np.cross(right, forward)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = up
    pose[:3, 2] = -forward
    pose[:3, 3] = eye
    return pose


def _analytic_render(origins, dirs, centers, sigmas, colors, amp,
                     t0, t1, steps, background):
    """Reference radiance integration over explicit Gaussian densities.

    Marches fixed uniform steps and accumulates opacity with the exponential
    transmittance law. Kept self-contained: the neural renderer must never
    be the oracle for itself.
    """
    n_rays = origins.shape[0]
    dt = (t1 - t0) / steps
    ts = t0 + (np.arange(steps) + 0.5) * dt
    pixel = np.zeros((n_rays, 3))
    trans = np.ones(n_rays)
    for t in ts:
        pts = origins + t * dirs
        d2 = ((pts[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        per_blob = amp * np.exp(-0.5 * d2 / (sigmas[None, :] ** 2))
        dens = per_blob.sum(axis=1)
        safe = np.maximum(dens, 1e-30)
        col = (per_blob[:, :, None] * colors[None, :, :]).sum(axis=1) \
            / safe[:, None]
        alpha = 1.0 - np.exp(-dens * dt)
        pixel += (trans * alpha)[:, None] * col
        trans *= 1.0 - alpha
    pixel += trans[:, None] * np.asarray(background)
    return pixel, 1.0 - trans


def generate_toy_scene(spec: ToySceneSpec, seed: int
                       ) -> tuple[GaussianSet, DatasetManifest]:
    """Procedural blob scene with analytically rendered ground truth.

    Returns the ground-truth blob set (one Gaussian per blob, feature
    zeros) and a manifest whose images come from the reference integrator.
    Deterministic per seed.
    """
    from .scene import camera_ray_arrays

    rng = np.random.default_rng(seed)
    centers = rng.uniform(-spec.blob_spread, spec.blob_spread,
                          size=(spec.n_blobs, 3))
    sigmas = rng.uniform(spec.blob_sigma[0], spec.blob_sigma[1],
                         size=spec.n_blobs)
    if spec.n_blobs:
        picks = rng.permutation(max(len(_PALETTE), spec.n_blobs))
        colors = _PALETTE[picks[:spec.n_blobs] % len(_PALETTE)]
    else:
        colors = np.zeros((0, 3))

    focal = focal_from_fov(spec.fov_x, spec.resolution)
    frames = []
    for c in range(spec.n_cameras):
        angle = 2.0 * np.pi * c / spec.n_cameras
        pose = _ring_pose(angle, spec.camera_distance)
        cam = Camera(pose=pose, focal=focal, width=spec.resolution,
                     height=spec.resolution, near=spec.near, far=spec.far)
        origins, directions = camera_ray_arrays(cam)
        pixel, _ = _analytic_render(
            origins, directions, centers, sigmas, colors,
            spec.density_amplitude, spec.near, spec.far, spec.march_steps,
            spec.background)
        image = np.clip(pixel, 0.0, 1.0).reshape(
            spec.resolution, spec.resolution, 3)
        frames.append(DatasetFrame(f"frame_{c:04d}.png", pose, image))

    gt = GaussianSet(
        means=centers,
        log_scales=np.log(np.maximum(sigmas[:, None] ** 2,
                                     1e-12)) * np.ones((1, 3)),
        features=np.zeros((spec.n_blobs, 1)),
        confidences=np.ones(spec.n_blobs),
    )
    manifest = DatasetManifest(
        frames=frames, width=spec.resolution, height=spec.resolution,
        focal=focal, near=spec.near, far=spec.far,
        background=spec.background)
    return gt, manifest


def save_dataset(manifest: DatasetManifest, out_dir: str | Path,
                 fov_x: float | None = None) -> Path:
    """Write manifest images and a transforms-JSON file; returns its path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for k, frame in enumerate(manifest.frames):
        name = Path(frame.image_path).name or f"frame_{k:04d}.png"
        save_image_png(out_dir / name, frame.image)
        entries.append({
            "file_path": name,
            "transform_matrix": np.asarray(frame.pose).tolist(),
        })
    if fov_x is None:
        fov_x = 2.0 * float(np.arctan(0.5 * manifest.width / manifest.focal))
    spec = {
        "camera_angle_x": fov_x,
        "near": manifest.near,
        "far": manifest.far,
        "frames": entries,
    }
    path = out_dir / "transforms.json"
    path.write_text(json.dumps(spec, indent=1))
    return path


TOY_GRID = HashGridConfig(
    levels=8, base_resolution=8, per_level_scale=1.5, table_size=2 ** 14,
    features_per_level=2, bounds_min=(-1.5, -1.5, -1.5),
    bounds_max=(1.5, 1.5, 1.5))


def toy_training_bundle(gt_set: GaussianSet, seed: int,
                        per_blob: int = 130,
                        init_variance: float = 0.01,
                        grid_config: HashGridConfig = TOY_GRID,
                        enc_config: EncodingConfig | None = None
                        ) -> SceneBundle:
    """Initial scene for toy training: Gaussians scattered around the
    ground-truth blobs (the stand-in for mesh-vertex initialization),
    a desk-scale grid, and a freshly seeded field network."""
    rng = np.random.default_rng(seed)
    means = []
    for b in range(len(gt_set)):
        sigma = float(np.exp(0.5 * gt_set.log_scales[b, 0]))
        means.append(gt_set.means[b]
                     + rng.normal(scale=sigma, size=(per_blob, 3)))
    means = np.concatenate(means) if means else np.zeros((0, 3))
    n = means.shape[0]
    fdim = grid_config.output_dim
    gset = GaussianSet(
        means=means,
        log_scales=np.full((n, 3), np.log(init_variance)),
        features=np.zeros((n, fdim)),
        confidences=np.ones(n),
    )
    net = FieldNetwork.init(fdim, rng, hidden=64, direction_frequencies=4)
    params = HashGridParams.init(grid_config, rng)
    if enc_config is None:
        enc_config = EncodingConfig(k=16, quantile=2.0, mode="live")
    return SceneBundle(gset, grid_config, params, net, enc_config)


# ---------------------------------------------------------------------------
# Run configuration files


def load_run_config(path: str | Path) -> dict:
    """Parse a nested key-value run config (YAML) into a plain dict."""
    import yaml

    with open(path) as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ValueError(f"run config {path} must be a mapping")
    return data
