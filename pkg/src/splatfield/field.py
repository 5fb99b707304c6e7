"""Small MLP from point features and view direction to color and density.

Two ReLU trunk layers feed a softplus density head; the color head sees the
trunk output concatenated with a sinusoidal encoding of the view direction
and ends in a sigmoid. All gradients are hand-derived reverse mode so the
whole pipeline stays plain float64 numpy and finite-difference checkable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PARAM_NAMES = ("w0", "b0", "w1", "b1", "w_sigma", "b_sigma",
               "w_c0", "b_c0", "w_c1", "b_c1")


def direction_encoding_dim(frequencies: int) -> int:
    return 3 + 6 * frequencies


def encode_direction(dirs: np.ndarray, frequencies: int = 4) -> np.ndarray:
    """Sinusoidal direction features: identity plus sin/cos octaves."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    parts = [dirs]
    for j in range(frequencies):
        parts.append(np.sin(2.0 ** j * dirs))
        parts.append(np.cos(2.0 ** j * dirs))
    return np.concatenate(parts, axis=1)


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


class FieldNetwork:
    """Parameter container; weights live in a name -> array dict."""

    def __init__(self, params: dict[str, np.ndarray], feature_dim: int,
                 hidden: int, direction_frequencies: int):
        self.params = {k: np.ascontiguousarray(v, dtype=np.float64)
                       for k, v in params.items()}
        self.feature_dim = feature_dim
        self.hidden = hidden
        self.direction_frequencies = direction_frequencies

    @classmethod
    def init(cls, feature_dim: int, rng: np.random.Generator,
             hidden: int = 64, direction_frequencies: int = 4) -> "FieldNetwork":
        d = direction_encoding_dim(direction_frequencies)

        def layer(fan_in, fan_out):
            bound = np.sqrt(6.0 / fan_in)
            return rng.uniform(-bound, bound, size=(fan_in, fan_out))

        params = {
            "w0": layer(feature_dim, hidden), "b0": np.zeros(hidden),
            "w1": layer(hidden, hidden), "b1": np.zeros(hidden),
            "w_sigma": layer(hidden, 1), "b_sigma": np.zeros(1),
            "w_c0": layer(hidden + d, hidden), "b_c0": np.zeros(hidden),
            "w_c1": layer(hidden, 3), "b_c1": np.zeros(3),
        }
        return cls(params, feature_dim, hidden, direction_frequencies)

    @classmethod
    def zeros(cls, feature_dim: int, hidden: int = 64,
              direction_frequencies: int = 4) -> "FieldNetwork":
        rng = np.random.default_rng(0)
        net = cls.init(feature_dim, rng, hidden, direction_frequencies)
        for v in net.params.values():
            v[...] = 0.0
        return net

    def copy(self) -> "FieldNetwork":
        return FieldNetwork({k: v.copy() for k, v in self.params.items()},
                            self.feature_dim, self.hidden,
                            self.direction_frequencies)

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}


@dataclass
class FieldCache:
    """Forward activations reused by the backward pass."""

    features: np.ndarray
    concat: np.ndarray      # trunk output joined with the direction encoding
    z0: np.ndarray
    h0: np.ndarray
    z1: np.ndarray
    z_sigma: np.ndarray
    z_c0: np.ndarray
    h_c0: np.ndarray
    color: np.ndarray
    empty: np.ndarray


def field_forward_batch(
    features: np.ndarray,
    directions: np.ndarray,
    net: FieldNetwork,
    empty: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, FieldCache]:
    """Batched forward: (P, F) features, (P, 3) unit directions.

    Returns colors in [0, 1]^3, non-negative densities, and the activation
    cache. Rows flagged ``empty`` (no Gaussian influences the point) get
    density exactly 0; their color is meaningless and must be ignored.
    """
    features = np.asarray(features, dtype=np.float64)
    if features.shape[1] != net.feature_dim:
        raise ValueError(
            f"feature dim {features.shape[1]} != network {net.feature_dim}")
    if not (np.isfinite(features).all() and np.isfinite(directions).all()):
        raise ValueError("field inputs must be finite")
    p = net.params
    dir_enc = encode_direction(directions, net.direction_frequencies)
    z0 = features @ p["w0"] + p["b0"]
    h0 = np.maximum(z0, 0.0)
    z1 = h0 @ p["w1"] + p["b1"]
    h1 = np.maximum(z1, 0.0)
    z_sigma = (h1 @ p["w_sigma"] + p["b_sigma"])[:, 0]
    sigma = softplus(z_sigma)
    concat = np.concatenate([h1, dir_enc], axis=1)
    z_c0 = concat @ p["w_c0"] + p["b_c0"]
    h_c0 = np.maximum(z_c0, 0.0)
    color = sigmoid(h_c0 @ p["w_c1"] + p["b_c1"])
    if empty is None:
        empty = np.zeros(features.shape[0], dtype=bool)
    else:
        empty = np.asarray(empty, dtype=bool)
        sigma = np.where(empty, 0.0, sigma)
    cache = FieldCache(features, concat, z0, h0, z1, z_sigma,
                       z_c0, h_c0, color, empty)
    return color, sigma, cache


def field_forward(feature: np.ndarray, direction: np.ndarray,
                  net: FieldNetwork,
                  empty: bool = False) -> tuple[np.ndarray, float]:
    """Single-point forward; see :func:`field_forward_batch`."""
    color, sigma, _ = field_forward_batch(
        np.asarray(feature, dtype=np.float64)[None, :],
        np.asarray(direction, dtype=np.float64)[None, :],
        net, np.array([empty]))
    return color[0], float(sigma[0])


def field_backward_batch(
    cache: FieldCache,
    net: FieldNetwork,
    d_color: np.ndarray,
    d_sigma: np.ndarray,
) -> tuple[dict[str, np.ndarray], np.ndarray]:
    """Reverse-mode gradients for the parameters and the input features."""
    p = net.params
    d_sigma = np.where(cache.empty, 0.0, np.asarray(d_sigma, dtype=np.float64))

    c = cache.color
    d_zc1 = np.asarray(d_color, dtype=np.float64) * c * (1.0 - c)
    grads = {
        "w_c1": cache.h_c0.T @ d_zc1,
        "b_c1": d_zc1.sum(axis=0),
    }
    d_hc0 = d_zc1 @ p["w_c1"].T
    d_zc0 = d_hc0 * (cache.z_c0 > 0.0)
    grads["w_c0"] = cache.concat.T @ d_zc0
    grads["b_c0"] = d_zc0.sum(axis=0)
    d_h1 = (d_zc0 @ p["w_c0"].T)[:, :net.hidden]

    h1 = cache.concat[:, :net.hidden]
    d_zs = d_sigma * sigmoid(cache.z_sigma)        # softplus' = sigmoid
    grads["w_sigma"] = h1.T @ d_zs[:, None]
    grads["b_sigma"] = np.array([d_zs.sum()])
    d_h1 = d_h1 + d_zs[:, None] @ p["w_sigma"].T

    d_z1 = d_h1 * (cache.z1 > 0.0)
    grads["w1"] = cache.h0.T @ d_z1
    grads["b1"] = d_z1.sum(axis=0)
    d_h0 = d_z1 @ p["w1"].T
    d_z0 = d_h0 * (cache.z0 > 0.0)
    grads["w0"] = cache.features.T @ d_z0
    grads["b0"] = d_z0.sum(axis=0)
    d_features = d_z0 @ p["w0"].T
    return grads, d_features
