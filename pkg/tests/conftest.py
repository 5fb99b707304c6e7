import numpy as np
import pytest

from splatfield.scene import GaussianSet


def make_random_set(rng: np.random.Generator, n: int, feature_dim: int = 4,
                    span: float = 1.0, var_lo: float = 1e-3,
                    var_hi: float = 4e-2, baked: bool = False) -> GaussianSet:
    """Random valid Gaussian set inside [-span, span]^3."""
    means = rng.uniform(-span, span, size=(n, 3))
    log_scales = np.log(rng.uniform(var_lo, var_hi, size=(n, 3)))
    features = rng.normal(size=(n, feature_dim))
    confidences = rng.uniform(0.2, 1.0, size=n)
    return GaussianSet(means, log_scales, features, confidences, baked=baked)


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)


def build_baked_bundle(seed: int = 21, per_blob: int = 60):
    """Small baked scene bundle: toy blobs, features frozen from the grid."""
    from splatfield.encoding import bake_features
    from splatfield.sceneio import (ToySceneSpec, generate_toy_scene,
                                    toy_training_bundle)

    spec = ToySceneSpec(n_cameras=2, resolution=16, march_steps=32)
    gt, manifest = generate_toy_scene(spec, seed=seed)
    bundle = toy_training_bundle(gt, seed=seed, per_blob=per_blob)
    bake_features(bundle.gset, bundle.grid_params, bundle.grid_config)
    import dataclasses
    bundle.enc_config = dataclasses.replace(bundle.enc_config, mode="baked")
    return bundle, manifest


@pytest.fixture(scope="session")
def baked_checkpoint(tmp_path_factory):
    """Path to a small baked checkpoint shared across CLI/service tests."""
    from splatfield.sceneio import save_checkpoint

    bundle, manifest = build_baked_bundle()
    path = tmp_path_factory.mktemp("fixtures") / "baked.spfc"
    save_checkpoint(bundle, path)
    return path, manifest
