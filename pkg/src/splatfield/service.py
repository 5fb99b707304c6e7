"""Local HTTP + WebSocket service for interactive editing and rendering.

Control plane is JSON (every payload carries a ``version`` field), pixels
travel as PNG bodies tagged with ``X-Epoch`` and ``X-Render-Seed`` headers.

Concurrency model: one writer, many readers. Renders grab an immutable
scene snapshot (set + index + parameters at one epoch) and work outside
the lock, so an edit landing mid-render can never bleed into the frame.
Edits clone the Gaussian set, mutate the clone, rebuild the index, and
swap the snapshot reference; a single preview worker then renders the
progressive ladder (low resolution first) for the newest epoch and pushes
frames to WebSocket subscribers in order.

The service executes file loads on behalf of its client and is meant for
loopback use; bind elsewhere only on networks you trust.
"""

from __future__ import annotations

import base64
import io
import queue
import threading
import time
from dataclasses import dataclass

import numpy as np
from fastapi import FastAPI, Request, Response, WebSocket, WebSocketDisconnect
from fastapi.responses import JSONResponse
from starlette.concurrency import run_in_threadpool

from .edit import EditError, Selection, apply_transform, bind_to_mesh, \
    deform_from_mesh, load_mesh_sequence, load_obj, rotation_about, \
    scaling, translation
from .encoding import build_index_for
from .proximity import effective_radii
from .render import RenderConfig, render_image
from .scene import Camera, SceneError
from .sceneio import CheckpointError, load_checkpoint

PROTOCOL_VERSION = 1

QUALITY_SAMPLES = {"low": 8, "medium": 24, "full": 48}

DEFAULT_LADDER = ((16, 16, 8), (64, 64, 16), (128, 128, 32))


@dataclass(frozen=True)
class SceneSnapshot:
    """Immutable view of the scene at one epoch. The gset inside a
    snapshot is never mutated; edits clone it first."""

    gset: object
    index: object
    grid_params: object
    grid_config: object
    net: object
    enc_config: object
    epoch: int


class EditSession:
    def __init__(self, threads: int = 1,
                 conflict_mode: str = "queue",
                 ladder: tuple = DEFAULT_LADDER):
        self.writer_lock = threading.Lock()
        self._snapshot_ref: SceneSnapshot | None = None
        self._snapshot_guard = threading.Lock()
        self.threads = threads
        self.conflict_mode = conflict_mode
        self.ladder = ladder
        self.subscribers: list[queue.Queue] = []
        self._subscribers_guard = threading.Lock()
        self.mesh = None
        self.binding = None
        self.after_snapshot_hook = None   # test injection point
        self._preview = _PreviewWorker(self)

    # -- snapshot plumbing ---------------------------------------------------

    def snapshot(self) -> SceneSnapshot | None:
        with self._snapshot_guard:
            snap = self._snapshot_ref
        if snap is not None and self.after_snapshot_hook is not None:
            hook, self.after_snapshot_hook = self.after_snapshot_hook, None
            hook()
        return snap

    def _swap(self, snap: SceneSnapshot) -> None:
        with self._snapshot_guard:
            self._snapshot_ref = snap

    def load(self, path: str) -> SceneSnapshot:
        bundle = load_checkpoint(path)
        index = build_index_for(bundle.gset, bundle.enc_config) \
            if len(bundle.gset) else None
        snap = SceneSnapshot(
            gset=bundle.gset, index=index,
            grid_params=bundle.grid_params, grid_config=bundle.grid_config,
            net=bundle.net, enc_config=bundle.enc_config,
            epoch=bundle.gset.epoch)
        self._swap(snap)
        return snap

    # -- fan-out ---------------------------------------------------------------

    def subscribe(self) -> queue.Queue:
        q: queue.Queue = queue.Queue()
        with self._subscribers_guard:
            self.subscribers.append(q)
        return q

    def unsubscribe(self, q: queue.Queue) -> None:
        with self._subscribers_guard:
            if q in self.subscribers:
                self.subscribers.remove(q)

    def broadcast(self, event: str, payload: dict) -> None:
        message = {"version": PROTOCOL_VERSION, "event": event,
                   "payload": payload}
        with self._subscribers_guard:
            targets = list(self.subscribers)
        for q in targets:
            q.put(message)

    # -- editing ---------------------------------------------------------------

    def apply_edit(self, op: str, selection_spec, params: dict) -> int:
        """Apply one edit under the writer lock; returns the new epoch."""
        snap = self.snapshot()
        if snap is None:
            raise NoSceneError()
        acquired = self.writer_lock.acquire(
            blocking=self.conflict_mode == "queue")
        if not acquired:
            raise WriterConflict()
        try:
            gset = snap.gset.clone()
            selection = _selection_from_json(selection_spec)
            if op == "translate":
                apply_transform(gset, selection, translation(params["t"]))
            elif op == "rotate":
                apply_transform(gset, selection, rotation_about(
                    params.get("axis", (0.0, 1.0, 0.0)),
                    float(params["angle"]),
                    params.get("pivot", (0.0, 0.0, 0.0))))
            elif op == "scale":
                apply_transform(gset, selection, scaling(
                    params["factors"], params.get("pivot", (0.0, 0.0, 0.0))))
            elif op == "bind_mesh":
                from pathlib import Path
                path = Path(params["path"])
                self.mesh = load_mesh_sequence(path) if path.is_dir() \
                    else load_obj(path)
                self.binding = bind_to_mesh(gset, self.mesh)
                gset.bump_epoch()
            elif op == "deform_frame":
                if self.mesh is None or self.binding is None:
                    raise EditError("deform_frame requires bind_mesh first")
                deform_from_mesh(gset, self.binding, self.mesh,
                                 int(params["frame"]))
            else:
                raise EditError(f"unknown edit op {op!r}")
            index = build_index_for(gset, snap.enc_config) \
                if len(gset) else None
            new_snap = SceneSnapshot(
                gset=gset, index=index, grid_params=snap.grid_params,
                grid_config=snap.grid_config, net=snap.net,
                enc_config=snap.enc_config, epoch=gset.epoch)
            self._swap(new_snap)
        finally:
            self.writer_lock.release()
        means = new_snap.gset.means
        dirty = {"min": means.min(axis=0).tolist(),
                 "max": means.max(axis=0).tolist()} if len(means) else None
        self.broadcast("epochChanged",
                       {"epoch": new_snap.epoch, "dirtyBounds": dirty})
        self._preview.request(new_snap.epoch)
        return new_snap.epoch

    def render_snapshot(self, snap: SceneSnapshot, camera: Camera,
                        samples: int, seed: int) -> np.ndarray:
        config = RenderConfig(n_samples=samples, seed=seed,
                              threads=self.threads)
        rgb, acc = render_image(
            camera, snap.gset, snap.index, snap.grid_params,
            snap.grid_config, snap.net, snap.enc_config, config)
        return rgb, acc

    def close(self) -> None:
        self._preview.stop()


class NoSceneError(RuntimeError):
    pass


class WriterConflict(RuntimeError):
    pass


class _PreviewWorker(threading.Thread):
    """Renders the progressive preview ladder for the newest epoch only.

    A single worker guarantees frames per epoch arrive in strictly
    increasing quality; a fresh edit abandons the remaining rungs of the
    superseded epoch.
    """

    def __init__(self, session: EditSession):
        super().__init__(daemon=True, name="preview-worker")
        self.session = session
        self._cond = threading.Condition()
        self._pending: int | None = None
        self._stop = False
        self.start()

    def request(self, epoch: int) -> None:
        with self._cond:
            self._pending = epoch
            self._cond.notify()

    def stop(self) -> None:
        with self._cond:
            self._stop = True
            self._cond.notify()

    def run(self) -> None:
        while True:
            with self._cond:
                while self._pending is None and not self._stop:
                    self._cond.wait()
                if self._stop:
                    return
                epoch = self._pending
                self._pending = None
            self._render_ladder(epoch)

    def _render_ladder(self, epoch: int) -> None:
        session = self.session
        for quality, (w, h, samples) in enumerate(session.ladder):
            snap = session.snapshot()
            if snap is None or snap.epoch != epoch:
                return   # superseded; the new epoch gets its own ladder
            camera = _default_camera(snap, w, h)
            rgb, _ = session.render_snapshot(snap, camera, samples, seed=0)
            png = _encode_png(rgb)
            session.broadcast("previewFrame", {
                "epoch": epoch,
                "quality": quality,
                "width": w,
                "height": h,
                "png_base64": base64.b64encode(png).decode(),
                "monotonic_ms": time.monotonic() * 1e3,
            })


def _default_camera(snap: SceneSnapshot, width: int, height: int) -> Camera:
    """Preview camera: looks at the scene centroid from outside its bounds."""
    if len(snap.gset):
        center = snap.gset.means.mean(axis=0)
        radius = float(np.linalg.norm(
            snap.gset.means - center, axis=1).max()) + 1e-3
    else:
        center, radius = np.zeros(3), 1.0
    distance = max(4.0 * radius, 1.0)
    pose = np.eye(4)
    pose[:3, 3] = center + np.array([0.0, 0.0, distance])
    return Camera(pose=pose, focal=float(width), width=width, height=height,
                  near=max(distance - 2.5 * radius, 1e-3),
                  far=distance + 2.5 * radius)


def _encode_png(rgb: np.ndarray, acc: np.ndarray | None = None) -> bytes:
    from PIL import Image

    rgb8 = np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)
    if acc is not None:
        a8 = np.clip(np.round(acc * 255.0), 0, 255).astype(np.uint8)
        arr = np.concatenate([rgb8, a8[:, :, None]], axis=2)
        img = Image.fromarray(arr, mode="RGBA")
    else:
        img = Image.fromarray(rgb8, mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def _selection_from_json(spec) -> Selection:
    if spec is None or spec == "all" \
            or (isinstance(spec, dict) and spec.get("all")):
        return Selection.all()
    if isinstance(spec, dict):
        if "indices" in spec:
            return Selection.of(spec["indices"])
        if "sphere" in spec:
            return Selection.in_sphere(spec["sphere"]["center"],
                                       spec["sphere"]["radius"])
        if "aabb" in spec:
            return Selection.in_aabb(spec["aabb"]["min"],
                                     spec["aabb"]["max"])
    if isinstance(spec, list):
        return Selection.of(spec)
    raise EditError(f"unrecognized selection {spec!r}")


def _json_error(status: int, message: str) -> JSONResponse:
    return JSONResponse({"version": PROTOCOL_VERSION, "error": message},
                        status_code=status)


def _poll_queue(q: queue.Queue):
    """Bounded wait so WebSocket tasks stay cancellable on disconnect."""
    try:
        return q.get(timeout=0.1)
    except queue.Empty:
        return None


def create_app(checkpoint_path: str | None = None, threads: int = 1,
               conflict_mode: str = "queue",
               ladder: tuple = DEFAULT_LADDER) -> FastAPI:
    from contextlib import asynccontextmanager

    session = EditSession(threads=threads, conflict_mode=conflict_mode,
                          ladder=ladder)

    @asynccontextmanager
    async def lifespan(_app):
        yield
        session.close()

    app = FastAPI(title="splatfield edit service", lifespan=lifespan)
    app.state.session = session
    if checkpoint_path is not None:
        session.load(checkpoint_path)

    @app.post("/scene/load")
    async def scene_load(request: Request):
        body = await request.json()
        path = body.get("checkpointPath")
        if path is None:
            return _json_error(422, "checkpointPath missing")
        import os
        if not os.path.exists(path):
            return _json_error(404, f"checkpoint not found: {path}")
        try:
            snap = await run_in_threadpool(session.load, path)
        except CheckpointError as exc:
            return _json_error(422, str(exc))
        means = snap.gset.means
        bounds = {"min": means.min(axis=0).tolist(),
                  "max": means.max(axis=0).tolist()} if len(means) else None
        return {"version": PROTOCOL_VERSION, "epoch": snap.epoch,
                "gaussianCount": len(snap.gset), "bounds": bounds}

    @app.post("/render")
    async def render(request: Request):
        body = await request.json()
        snap = session.snapshot()
        if snap is None:
            return _json_error(409, "no scene loaded")
        try:
            cam_spec = body["camera"]
            camera = Camera(
                pose=np.asarray(cam_spec["pose"], dtype=np.float64),
                focal=float(cam_spec["focal"]),
                width=int(body.get("width", 64)),
                height=int(body.get("height", 64)),
                near=float(cam_spec.get("near", 0.1)),
                far=float(cam_spec.get("far", 10.0)))
            camera.validate()
        except (KeyError, TypeError, ValueError, SceneError) as exc:
            return _json_error(422, f"invalid camera: {exc}")
        quality = body.get("quality", "full")
        if quality not in QUALITY_SAMPLES:
            return _json_error(422, f"unknown quality {quality!r}")
        seed = int(body.get("seed", 0))
        rgb, acc = await run_in_threadpool(
            session.render_snapshot, snap, camera,
            QUALITY_SAMPLES[quality], seed)
        png = _encode_png(rgb, acc)
        return Response(content=png, media_type="image/png", headers={
            "X-Epoch": str(snap.epoch),
            "X-Render-Seed": str(seed),
        })

    @app.post("/edit")
    async def edit(request: Request):
        body = await request.json()
        try:
            epoch = await run_in_threadpool(
                session.apply_edit, body.get("op"),
                body.get("selection"), body.get("params", {}))
        except NoSceneError:
            return _json_error(409, "no scene loaded")
        except WriterConflict:
            return _json_error(409, "another edit is in flight")
        except (EditError, KeyError, TypeError, ValueError) as exc:
            return _json_error(422, f"invalid edit: {exc}")
        return {"version": PROTOCOL_VERSION, "newEpoch": epoch}

    @app.get("/gaussians")
    async def gaussians(bounds: str):
        snap = session.snapshot()
        if snap is None:
            return _json_error(409, "no scene loaded")
        try:
            values = [float(v) for v in bounds.split(",")]
            if len(values) != 6:
                raise ValueError("need 6 comma-separated numbers")
            lo, hi = np.array(values[:3]), np.array(values[3:])
        except ValueError as exc:
            return _json_error(400, f"malformed bounds: {exc}")
        gset = snap.gset
        inside = ((gset.means >= lo) & (gset.means <= hi)).all(axis=1)
        radii = effective_radii(gset, snap.enc_config.quantile,
                                snap.enc_config.raw_eigenvalue_radius)
        items = [
            {"index": int(i), "mean": gset.means[i].tolist(),
             "radius": float(radii[i]),
             "confidence": float(gset.confidences[i])}
            for i in np.flatnonzero(inside)
        ]
        return {"version": PROTOCOL_VERSION, "epoch": snap.epoch,
                "gaussians": items}

    @app.websocket("/subscribe")
    async def subscribe(ws: WebSocket):
        await ws.accept()
        snap = session.snapshot()
        q = session.subscribe()
        try:
            await ws.send_json({
                "version": PROTOCOL_VERSION, "event": "hello",
                "payload": {"epoch": snap.epoch if snap else None}})
            while True:
                message = await run_in_threadpool(_poll_queue, q)
                if message is not None:
                    await ws.send_json(message)
        except WebSocketDisconnect:
            pass
        finally:
            session.unsubscribe(q)

    return app
