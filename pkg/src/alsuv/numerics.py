"""Dense feed-forward networks with exact reverse-mode input gradients.

Every network in the lab (the generator and all encoders) is an ``Mlp``.
Forward and backward passes accept either a single vector of shape
``(d,)`` or a batch of row vectors of shape ``(b, d)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

ACTIVATIONS = ("tanh", "relu", "identity")
FORMAT_VERSION = 1


class DegenerateEmbeddingError(ValueError):
    """Raised when a normalized network output has zero norm."""


@dataclass(frozen=True)
class Layer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "tanh"

    def __post_init__(self):
        w = np.array(self.weight, dtype=np.float64)
        b = np.array(self.bias, dtype=np.float64)
        if w.ndim != 2 or b.ndim != 1 or w.shape[0] != b.shape[0]:
            raise ValueError(f"inconsistent layer shapes {w.shape} / {b.shape}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not (np.all(np.isfinite(w)) and np.all(np.isfinite(b))):
            raise ValueError("layer parameters must be finite")
        w.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "weight", w)
        object.__setattr__(self, "bias", b)

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


@dataclass(frozen=True)
class Mlp:
    layers: tuple[Layer, ...]
    normalize_output: bool = False

    def __post_init__(self):
        layers = tuple(self.layers)
        if not layers:
            raise ValueError("an Mlp needs at least one layer")
        for prev, nxt in zip(layers, layers[1:]):
            if prev.out_dim != nxt.in_dim:
                raise ValueError(
                    f"layer dimensions do not chain: {prev.out_dim} -> {nxt.in_dim}"
                )
        object.__setattr__(self, "layers", layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def dims(self) -> list[int]:
        return [self.input_dim] + [layer.out_dim for layer in self.layers]

    def __call__(self, x):
        return mlp_forward(self, x)


def _activate(name: str, a: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(a)
    if name == "relu":
        return np.maximum(a, 0.0)
    return a


def _activation_grad(name: str, a: np.ndarray, h: np.ndarray) -> np.ndarray:
    # h is the activation output; a the pre-activation
    if name == "tanh":
        return 1.0 - h * h
    if name == "relu":
        return (a > 0.0).astype(np.float64)
    return np.ones_like(a)


def _as_batch(net: Mlp, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != net.input_dim:
        raise ValueError(f"input of shape {x.shape} does not match input_dim {net.input_dim}")
    return xb, single


def _forward_trace(net: Mlp, xb: np.ndarray):
    """Run the layers, keeping pre-activations and activations for backprop."""
    pre, post = [], [xb]
    h = xb
    for layer in net.layers:
        a = h @ layer.weight.T + layer.bias
        h = _activate(layer.activation, a)
        pre.append(a)
        post.append(h)
    return pre, post


def _normalize_rows(u: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.sqrt(np.sum(u * u, axis=1))
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        raise DegenerateEmbeddingError("degenerate embedding")
    return u / norms[:, None], norms


def mlp_forward(net: Mlp, x) -> np.ndarray:
    xb, single = _as_batch(net, x)
    _, post = _forward_trace(net, xb)
    out = post[-1]
    if net.normalize_output:
        out, _ = _normalize_rows(out)
    return out[0] if single else out


def mlp_grad_input(net: Mlp, x, upstream) -> np.ndarray:
    """Vector-Jacobian product ``J(x)^T upstream`` of ``mlp_forward``."""
    xb, single = _as_batch(net, x)
    g = np.asarray(upstream, dtype=np.float64)
    gb = g[None, :] if g.ndim == 1 else g
    if gb.shape != (xb.shape[0], net.output_dim):
        raise ValueError(f"upstream of shape {g.shape} does not match output_dim {net.output_dim}")
    pre, post = _forward_trace(net, xb)
    if net.normalize_output:
        y, norms = _normalize_rows(post[-1])
        # d(u/|u|)^T g = (g - y <y, g>) / |u|
        gb = (gb - y * np.sum(y * gb, axis=1)[:, None]) / norms[:, None]
    for k in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[k]
        gb = gb * _activation_grad(layer.activation, pre[k], post[k + 1])
        gb = gb @ layer.weight
    return gb[0] if single else gb


def cosine_similarity(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity of a zero vector")
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def cosine_similarity_rows(a: np.ndarray, b) -> np.ndarray:
    """Row-wise cosine similarity of a batch ``a`` against a single vector ``b``."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.asarray(b, dtype=np.float64)
    na = np.sqrt(np.sum(a * a, axis=1))
    nb = np.linalg.norm(b)
    if np.any(na == 0.0) or nb == 0.0:
        raise ValueError("cosine similarity of a zero vector")
    return np.clip((a @ b) / (na * nb), -1.0, 1.0)


def cosine_similarity_grad(a, b) -> np.ndarray:
    """Gradient of ``cosine_similarity(a, b)`` with respect to ``a``.

    Accepts a batch of rows for ``a``.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    ab = np.atleast_2d(a)
    na = np.sqrt(np.sum(ab * ab, axis=1))
    nb = np.linalg.norm(b)
    if np.any(na == 0.0) or nb == 0.0:
        raise ValueError("cosine similarity of a zero vector")
    dots = ab @ b
    grad = b[None, :] / (na * nb)[:, None] - (dots / (na**3 * nb))[:, None] * ab
    return grad[0] if a.ndim == 1 else grad


def finite_difference_grad(f: Callable[[np.ndarray], float], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of a scalar function."""
    if h <= 0:
        raise ValueError("step h must be positive")
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        grad.flat[i] = (f(x + e) - f(x - e)) / (2.0 * h)
    return grad


def dual_layer_forward(weight, bias, x, activation: str = "tanh") -> np.ndarray:
    """Evaluate ``act(W x + b)`` with the layer read as a function of its parameters.

    Row ``i`` of the weight matrix is the input and ``x`` plays the role of the
    weights: ``diag(x) w_i + b_i 1`` is summed over its entries.
    """
    w = np.asarray(weight, dtype=np.float64)
    b = np.asarray(bias, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if w.ndim != 2 or b.shape != (w.shape[0],) or x.shape != (w.shape[1],):
        raise ValueError("dimension mismatch in dual layer")
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation {activation!r}")
    # diag(x) acts as the weight matrix applied to the input row w_i
    diag_x = np.diag(x)
    out = np.empty(w.shape[0])
    for i in range(w.shape[0]):
        out[i] = np.sum(diag_x @ w[i]) + b[i]
    return _activate(activation, out)


def layer_forward(layer: Layer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return _activate(layer.activation, layer.weight @ x + layer.bias)


# -- serialization -----------------------------------------------------------


def mlp_to_dict(net: Mlp) -> dict:
    return {
        "version": FORMAT_VERSION,
        "dims": net.dims,
        "layers": [
            {"w": layer.weight.tolist(), "b": layer.bias.tolist(), "act": layer.activation}
            for layer in net.layers
        ],
        "normalize_output": net.normalize_output,
    }


def mlp_from_dict(doc: dict) -> Mlp:
    if doc.get("version") != FORMAT_VERSION:
        raise ValueError(f"unsupported network format version {doc.get('version')!r}")
    layers = tuple(
        Layer(np.array(layer_doc["w"], dtype=np.float64), np.array(layer_doc["b"], dtype=np.float64), layer_doc["act"])
        for layer_doc in doc["layers"]
    )
    net = Mlp(layers, bool(doc["normalize_output"]))
    if net.dims != list(doc["dims"]):
        raise ValueError(f"declared dims {doc['dims']} do not match layers {net.dims}")
    return net


def mlp_to_json(net: Mlp) -> str:
    return json.dumps(mlp_to_dict(net))


def mlp_from_json(text: str) -> Mlp:
    return mlp_from_dict(json.loads(text))


def random_mlp(
    rng: np.random.Generator,
    dims: Sequence[int],
    activation: str = "tanh",
    out_activation: str = "identity",
    normalize_output: bool = False,
    gain: float = 1.0,
    out_gain: float | None = None,
    bias_scale: float = 0.1,
) -> Mlp:
    """Mlp with hidden weights ~ N(0, gain^2 / fan_in) and biases ~ N(0, bias_scale^2).

    ``out_gain`` (default ``gain``) scales the output layer separately, so the
    roughness of the function and its amplitude can be set independently.
    """
    out_gain = gain if out_gain is None else out_gain
    layers = []
    last = len(dims) - 2
    for k, (d_in, d_out) in enumerate(zip(dims[:-1], dims[1:])):
        g = out_gain if k == last else gain
        w = rng.standard_normal((d_out, d_in)) * (g / np.sqrt(d_in))
        b = bias_scale * rng.standard_normal(d_out)
        layers.append(Layer(w, b, out_activation if k == last else activation))
    return Mlp(tuple(layers), normalize_output)
