"""Command-line entry point.

Subcommands: gen-toy, train, render, edit, verify, bench, serve.
Exit codes: 0 success, 1 verification or edit failure, 2 usage/IO error.
Every subcommand writes only to its declared output paths; progress goes
to standard error, data (bench CSV) to standard output.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

DEFAULT_SEED = 0


def _error(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 2


def _load_yaml_config(path: str | None) -> dict:
    if path is None:
        return {}
    from .sceneio import load_run_config
    return load_run_config(path)


def _train_config_from(config: dict, args) -> "TrainConfig":
    from .sceneio import dataclass_from_dict
    from .trainer import TrainConfig

    data = dict(config.get("train", {}))
    if args.steps is not None:
        data["steps"] = args.steps
    if args.seed is not None:
        data["seed"] = args.seed
    if getattr(args, "learnable_means", None) is not None:
        data["learnable_means"] = args.learnable_means == "on"
    cfg = dataclass_from_dict(TrainConfig, data)
    if getattr(args, "confidence_mode", None):
        cfg.prune.additive = args.confidence_mode == "additive"
    return cfg


def _enc_config_from(config: dict, args) -> "EncodingConfig":
    from .encoding import EncodingConfig
    from .sceneio import dataclass_from_dict

    data = dict(config.get("encoding", {}))
    if getattr(args, "k", None) is not None:
        data["k"] = args.k
    if getattr(args, "q", None) is not None:
        data["quantile"] = args.q
    if getattr(args, "mode", None):
        data["mode"] = args.mode
    if getattr(args, "raw_eigenvalue_radius", False):
        data["raw_eigenvalue_radius"] = True
    return dataclass_from_dict(EncodingConfig, data)


def cmd_gen_toy(args) -> int:
    from .sceneio import (ToySceneSpec, dataclass_from_dict,
                          generate_toy_scene, save_checkpoint, save_dataset,
                          toy_training_bundle)

    config = _load_yaml_config(args.config)
    spec_data = dict(config.get("toy", {}))
    if args.blobs is not None:
        spec_data["n_blobs"] = args.blobs
    if args.resolution is not None:
        spec_data["resolution"] = args.resolution
    if args.cameras is not None:
        spec_data["n_cameras"] = args.cameras
    spec = dataclass_from_dict(ToySceneSpec, spec_data)
    seed = args.seed if args.seed is not None else DEFAULT_SEED
    gt, manifest = generate_toy_scene(spec, seed)
    out = Path(args.out)
    save_dataset(manifest, out)
    bundle = toy_training_bundle(gt, seed)
    save_checkpoint(bundle, out / "init.spfc")
    print(f"wrote {len(manifest)} views and init checkpoint to {out}",
          file=sys.stderr)
    return 0


def cmd_train(args) -> int:
    from .sceneio import load_checkpoint, load_dataset
    from .trainer import run_training

    config = _load_yaml_config(args.config)
    try:
        dataset = load_dataset(args.dataset)
    except Exception as exc:
        return _error(f"dataset {args.dataset}: {exc}")
    try:
        bundle = load_checkpoint(args.init)
    except Exception as exc:
        return _error(f"init checkpoint {args.init}: {exc}")
    if not args.resume:
        bundle.trainer_state = None
    train_config = _train_config_from(config, args)
    if config.get("encoding") or args.k or args.q \
            or args.raw_eigenvalue_radius:
        bundle.enc_config = _enc_config_from(config, args)
    run_training(train_config, dataset, bundle, out_path=args.out)
    print(f"checkpoint written to {args.out}", file=sys.stderr)
    return 0


def _camera_from_spec(path: str, fallback_size: int = 64) -> "Camera":
    from .scene import Camera
    from .sceneio import focal_from_fov

    spec = json.loads(Path(path).read_text())
    width = int(spec.get("width", fallback_size))
    height = int(spec.get("height", fallback_size))
    if "focal" in spec:
        focal = float(spec["focal"])
    elif "fov_x" in spec:
        focal = focal_from_fov(float(spec["fov_x"]), width)
    else:
        raise ValueError("camera spec needs 'focal' or 'fov_x'")
    return Camera(pose=np.asarray(spec["pose"], dtype=np.float64),
                  focal=focal, width=width, height=height,
                  near=float(spec.get("near", 0.1)),
                  far=float(spec.get("far", 10.0)))


def cmd_render(args) -> int:
    from .encoding import build_index_for
    from .render import RenderConfig, render_image
    from .sceneio import (dataclass_from_dict, load_checkpoint,
                          save_image_png, save_raw_dump)

    try:
        bundle = load_checkpoint(args.checkpoint)
    except Exception as exc:
        return _error(f"checkpoint {args.checkpoint}: {exc}")
    try:
        camera = _camera_from_spec(args.camera)
    except Exception as exc:
        return _error(f"camera spec {args.camera}: {exc}")
    data = dict(_load_yaml_config(args.config).get("render", {}))
    if args.samples is not None:
        data["n_samples"] = args.samples
    if args.stratified:
        data["stratified"] = True
    if args.seed is not None:
        data["seed"] = args.seed
    data["threads"] = args.threads
    config = dataclass_from_dict(RenderConfig, data)
    if args.mode:
        bundle.enc_config = dataclasses.replace(bundle.enc_config,
                                                mode=args.mode)
    index = build_index_for(bundle.gset, bundle.enc_config) \
        if len(bundle.gset) else None
    rgb, acc = render_image(camera, bundle.gset, index, bundle.grid_params,
                            bundle.grid_config, bundle.net,
                            bundle.enc_config, config)
    save_image_png(args.out, rgb, acc)
    if args.raw_dump:
        save_raw_dump(args.raw_dump, rgb, acc)
    print(f"rendered {camera.width}x{camera.height} to {args.out}",
          file=sys.stderr)
    return 0


def cmd_edit(args) -> int:
    import yaml

    from .edit import (EditError, Selection, apply_transform, bind_to_mesh,
                       deform_from_mesh, load_mesh_sequence, load_obj,
                       rotation_about, scaling, translation)
    from .sceneio import load_checkpoint, save_checkpoint

    try:
        bundle = load_checkpoint(args.checkpoint)
    except Exception as exc:
        return _error(f"checkpoint {args.checkpoint}: {exc}")
    try:
        with open(args.script) as f:
            script = yaml.safe_load(f) or []
    except Exception as exc:
        return _error(f"edit script {args.script}: {exc}")
    if not isinstance(script, list):
        return _error("edit script must be a list of commands")

    gset = bundle.gset
    mesh = None
    binding = None
    for ordinal, cmd in enumerate(script):
        try:
            op = cmd.get("op")
            params = cmd.get("params", {})
            selection = _parse_selection(cmd.get("selection"))
            if op == "translate":
                apply_transform(gset, selection, translation(params["t"]))
            elif op == "rotate":
                apply_transform(gset, selection, rotation_about(
                    params.get("axis", [0, 1, 0]), float(params["angle"]),
                    params.get("pivot", (0, 0, 0))))
            elif op == "scale":
                apply_transform(gset, selection, scaling(
                    params["factors"], params.get("pivot", (0, 0, 0))))
            elif op == "transform":
                apply_transform(
                    gset, selection,
                    np.asarray(params["matrix"], dtype=np.float64))
            elif op == "bind_mesh":
                path = Path(params["path"])
                mesh = load_mesh_sequence(path) if path.is_dir() \
                    else load_obj(path)
                binding = bind_to_mesh(gset, mesh)
            elif op == "deform_frame":
                if binding is None or mesh is None:
                    raise EditError("deform_frame requires a prior bind_mesh")
                deform_from_mesh(gset, binding, mesh, int(params["frame"]))
            else:
                raise EditError(f"unknown op {op!r}")
        except (EditError, KeyError, TypeError, ValueError) as exc:
            print(f"error: command {ordinal}: {exc}", file=sys.stderr)
            return 1
    save_checkpoint(bundle, args.out)
    print(f"applied {len(script)} edits -> {args.out}", file=sys.stderr)
    return 0


def _parse_selection(spec) -> "Selection":
    from .edit import Selection

    if spec is None or spec == "all" or spec is True \
            or (isinstance(spec, dict) and spec.get("all")):
        return Selection.all()
    if isinstance(spec, dict):
        if "indices" in spec:
            return Selection.of(spec["indices"])
        if "sphere" in spec:
            return Selection.in_sphere(spec["sphere"]["center"],
                                       spec["sphere"]["radius"])
        if "aabb" in spec:
            return Selection.in_aabb(spec["aabb"]["min"], spec["aabb"]["max"])
    if isinstance(spec, list):
        return Selection.of(spec)
    raise ValueError(f"unrecognized selection {spec!r}")


def cmd_verify(args) -> int:
    from .sceneio import load_checkpoint
    from .verify import run_suite

    try:
        bundle = load_checkpoint(args.checkpoint)
    except Exception as exc:
        return _error(f"checkpoint {args.checkpoint}: {exc}")
    seed = args.seed if args.seed is not None else DEFAULT_SEED
    results = run_suite(bundle, seed=seed, trials=args.trials)
    for result in results:
        print(result.line())
    return 0 if all(r.passed for r in results) else 1


def bench_rows(sizes, ks, qs, n_queries: int, repeat: int, seed: int,
               renderer: bool = False) -> list[dict]:
    """Timing rows for the bench CSV; separated out for tests."""
    from .proximity import brute_force_query, build_index, query
    from .scene import GaussianSet

    rng = np.random.default_rng(seed)
    rows = []
    for n in sizes:
        means = rng.uniform(-1, 1, size=(n, 3))
        gset = GaussianSet(
            means, np.log(rng.uniform(1e-3, 4e-2, size=(n, 3))),
            np.zeros((n, 1)), np.ones(n))
        for q_val in qs:
            t0 = time.perf_counter()
            index = build_index(gset, q_val)
            build_ms = (time.perf_counter() - t0) * 1e3
            queries = rng.uniform(-1, 1, size=(n_queries, 3))
            for k in ks:
                samples = np.empty((repeat, n_queries))
                for r in range(repeat):
                    for i, x in enumerate(queries):
                        t0 = time.perf_counter()
                        query(index, gset, x, k)
                        samples[r, i] = (time.perf_counter() - t0) * 1e6
                times = np.median(samples, axis=0)   # per-query run median
                brute = []
                for x in queries[: max(10, n_queries // 10)]:
                    t0 = time.perf_counter()
                    brute_force_query(gset, x, k, q_val)
                    brute.append((time.perf_counter() - t0) * 1e6)
                row = {
                    "n": n, "k": k, "Q": q_val, "build_ms": build_ms,
                    "query_us_p50": float(np.percentile(times, 50)),
                    "query_us_p99": float(np.percentile(times, 99)),
                    "brute_us_p50": float(np.percentile(brute, 50)),
                    "rays_per_sec": (_renderer_throughput(gset, k, q_val)
                                     if renderer else None),
                }
                rows.append(row)
    return rows


def cmd_bench(args) -> int:
    sizes = [int(s) for s in args.sizes.split(",")]
    ks = [int(s) for s in args.ks.split(",")]
    qs = [float(s) for s in args.qs.split(",")]
    seed = args.seed if args.seed is not None else DEFAULT_SEED
    rows = bench_rows(sizes, ks, qs, args.queries, args.repeat, seed,
                      renderer=args.renderer)
    print("n,k,Q,build_ms,query_us_p50,query_us_p99,brute_us_p50,"
          "rays_per_sec")
    for row in rows:
        rays = f"{row['rays_per_sec']:.0f}" if row["rays_per_sec"] else ""
        print(f"{row['n']},{row['k']},{row['Q']},{row['build_ms']:.3f},"
              f"{row['query_us_p50']:.2f},{row['query_us_p99']:.2f},"
              f"{row['brute_us_p50']:.2f},{rays}")
    return 0


def _renderer_throughput(gset, k: int, q_val: float) -> float:
    from .encoding import EncodingConfig, build_index_for
    from .field import FieldNetwork
    from .hashgrid import HashGridConfig, HashGridParams
    from .render import render_rays

    rng = np.random.default_rng(0)
    grid_config = HashGridConfig(levels=4, base_resolution=8,
                                 per_level_scale=1.6, table_size=2 ** 12,
                                 features_per_level=2,
                                 bounds_min=(-1.5, -1.5, -1.5),
                                 bounds_max=(1.5, 1.5, 1.5))
    params = HashGridParams.init(grid_config, rng)
    net = FieldNetwork.init(grid_config.output_dim, rng)
    enc = EncodingConfig(k=k, quantile=q_val)
    index = build_index_for(gset, enc)
    n_rays = 512
    dirs = rng.normal(size=(n_rays, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.tile(np.array([[0.0, 0.0, 2.5]]), (n_rays, 1))
    t0 = time.perf_counter()
    render_rays(origins, dirs, 1.0, 4.0, gset, index, params, grid_config,
                net, enc, 32, (1.0, 1.0, 1.0))
    return n_rays / (time.perf_counter() - t0)


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(checkpoint_path=args.checkpoint,
                     threads=args.threads)
    uvicorn.run(app, host=args.bind, port=args.port, log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="splatfield",
        description="Editable Gaussian-conditioned radiance fields on CPU")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-toy", help="generate a procedural toy dataset")
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--config", help="run config YAML")
    p.add_argument("--seed", type=int, help="generation seed")
    p.add_argument("--blobs", type=int, help="number of blobs")
    p.add_argument("--resolution", type=int, help="image resolution")
    p.add_argument("--cameras", type=int, help="number of ring cameras")
    p.set_defaults(func=cmd_gen_toy)

    p = sub.add_parser("train", help="train a scene")
    p.add_argument("--dataset", required=True,
                   help="transforms.json path or dataset directory")
    p.add_argument("--init", required=True,
                   help="initial scene checkpoint")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.add_argument("--config", help="run config YAML")
    p.add_argument("--steps", type=int, help="training steps")
    p.add_argument("--seed", type=int, help="training seed")
    p.add_argument("--k", type=int, help="neighbor budget")
    p.add_argument("--q", type=float, help="confidence-sphere quantile")
    p.add_argument("--mode", choices=("live", "baked"),
                   help="feature source during training")
    p.add_argument("--raw-eigenvalue-radius", action="store_true",
                   help="use the raw max-eigenvalue sphere radius")
    p.add_argument("--confidence-mode",
                   choices=("additive", "multiplicative"),
                   help="confidence update rule for pruning")
    p.add_argument("--learnable-means", choices=("on", "off"),
                   help="train Gaussian means")
    p.add_argument("--resume", action="store_true",
                   help="resume from the init checkpoint's trainer state")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="render a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--camera", required=True, help="camera spec JSON")
    p.add_argument("--out", required=True, help="output PNG path")
    p.add_argument("--config", help="run config YAML (render section)")
    p.add_argument("--raw-dump", help="optional raw float dump path")
    p.add_argument("--samples", type=int, help="samples per ray")
    p.add_argument("--stratified", action="store_true",
                   help="jitter samples within bins")
    p.add_argument("--mode", choices=("live", "baked"),
                   help="override the checkpoint's feature source")
    p.add_argument("--seed", type=int, help="sampling seed")
    p.add_argument("--threads", type=int, default=1,
                   help="render worker threads")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("edit", help="apply a scripted edit sequence")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--script", required=True, help="edit script YAML")
    p.add_argument("--out", required=True, help="output checkpoint path")
    p.set_defaults(func=cmd_edit)

    p = sub.add_parser("verify", help="run property suites on a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--trials", type=int, default=300,
                   help="randomized trial count")
    p.add_argument("--seed", type=int, help="suite seed")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="proximity/render benchmarks as CSV")
    p.add_argument("--sizes", default="1000,10000",
                   help="comma-separated scene sizes")
    p.add_argument("--ks", default="1,4,16", help="comma-separated k values")
    p.add_argument("--qs", default="2.0", help="comma-separated quantiles")
    p.add_argument("--queries", type=int, default=200,
                   help="queries per configuration")
    p.add_argument("--repeat", type=int, default=3,
                   help="timing repetitions")
    p.add_argument("--renderer", action="store_true",
                   help="also measure renderer rays/sec")
    p.add_argument("--seed", type=int, help="benchmark seed")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="start the local edit service")
    p.add_argument("--checkpoint", help="checkpoint to load at startup")
    p.add_argument("--port", type=int, default=8754)
    p.add_argument("--bind", default="127.0.0.1",
                   help="bind address (loopback by default)")
    p.add_argument("--threads", type=int, default=1,
                   help="render worker threads")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(stream=sys.stderr, level=logging.INFO,
                        format="%(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BrokenPipeError:
        return 0


if __name__ == "__main__":
    sys.exit(main())
