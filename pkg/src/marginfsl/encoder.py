"""Fully connected embedding network with explicit forward/backward passes."""

import json
from dataclasses import dataclass, field

import numpy as np

from .tensor import ShapeError

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class EncoderSpec:
    layer_widths: tuple
    activation: str = "relu"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("encoder needs at least an input and an output width")
        if any(w < 1 for w in widths):
            raise ValueError(f"layer widths must be >= 1, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def in_dim(self):
        return self.layer_widths[0]

    @property
    def out_dim(self):
        return self.layer_widths[-1]


@dataclass
class EncoderParams:
    spec: EncoderSpec
    weights: list
    biases: list

    def arrays(self):
        """Parameter arrays in a fixed order (w0, b0, w1, b1, ...)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out.extend((w, b))
        return out

    def with_arrays(self, arrays):
        arrays = list(arrays)
        return EncoderParams(self.spec, arrays[0::2], arrays[1::2])

    def zeros_like(self):
        return self.with_arrays([np.zeros_like(a) for a in self.arrays()])

    def copy(self):
        return self.with_arrays([a.copy() for a in self.arrays()])

    def to_dict(self):
        return {
            "layer_widths": list(self.spec.layer_widths),
            "activation": self.spec.activation,
            "weights": [w.tolist() for w in self.weights],
            "biases": [b.tolist() for b in self.biases],
        }

    @classmethod
    def from_dict(cls, d):
        spec = EncoderSpec(tuple(d["layer_widths"]), d.get("activation", "relu"))
        weights = [np.asarray(w, dtype=np.float64).reshape(i, o)
                   for w, i, o in zip(d["weights"], spec.layer_widths[:-1], spec.layer_widths[1:])]
        biases = [np.asarray(b, dtype=np.float64).reshape(-1) for b in d["biases"]]
        params = cls(spec, weights, biases)
        _check_shapes(params)
        return params


@dataclass
class ForwardCache:
    spec: EncoderSpec
    inputs: list = field(default_factory=list)       # input to each layer
    preacts: list = field(default_factory=list)      # pre-activation of each layer


def _check_shapes(params):
    widths = params.spec.layer_widths
    if len(params.weights) != len(widths) - 1 or len(params.biases) != len(widths) - 1:
        raise ShapeError("parameter count does not match layer widths")
    for w, b, i, o in zip(params.weights, params.biases, widths[:-1], widths[1:]):
        if w.shape != (i, o) or b.shape != (o,):
            raise ShapeError(f"layer shape {w.shape}/{b.shape}, expected ({i}, {o})/({o},)")


def init(spec, seed):
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return EncoderParams(spec, weights, biases)


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _act_grad(name, z):
    if name == "relu":
        return (z > 0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


def forward(params, x):
    """Embed the rows of ``x``; returns (embeddings, cache)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.spec.in_dim:
        raise ShapeError(f"encoder input has shape {x.shape}, expected (n, {params.spec.in_dim})")
    cache = ForwardCache(params.spec)
    h = x
    last = len(params.weights) - 1
    for i, (w, b) in enumerate(zip(params.weights, params.biases)):
        cache.inputs.append(h)
        z = h @ w + b
        cache.preacts.append(z)
        h = z if i == last else _act(params.spec.activation, z)
    return h, cache


def backward(params, cache, grad_embeddings):
    """Reverse-mode pass; returns (grad_params, grad_input)."""
    if cache.spec != params.spec or len(cache.inputs) != len(params.weights):
        raise ValueError("forward cache does not belong to these parameters")
    g = np.asarray(grad_embeddings, dtype=np.float64)
    if g.shape != cache.preacts[-1].shape:
        raise ShapeError(f"cotangent shape {g.shape}, expected {cache.preacts[-1].shape}")
    last = len(params.weights) - 1
    gw = [None] * len(params.weights)
    gb = [None] * len(params.weights)
    for i in range(last, -1, -1):
        if i != last:
            g = g * _act_grad(params.spec.activation, cache.preacts[i])
        gw[i] = cache.inputs[i].T @ g
        gb[i] = g.sum(axis=0)
        g = g @ params.weights[i].T
    return EncoderParams(params.spec, gw, gb), g


def save(params, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(params.to_dict(), fh)


def load(path):
    with open(path, encoding="utf-8") as fh:
        return EncoderParams.from_dict(json.load(fh))
