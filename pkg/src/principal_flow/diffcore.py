"""Small multilayer perceptron with a hand-written reverse pass.

Parameters live in one flat float64 vector. Canonical order, layer by layer:
the weight matrix of shape ``(out_width, in_width)`` in row-major order, then
the bias of length ``out_width``. Hidden layers apply the activation, the
output layer is affine.

All functions accept a single point of shape ``(2,)`` or a batch ``(B, 2)``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ContractError, FormatError, NumericInputError

CHECKPOINT_FORMAT_VERSION = 1
ACTIVATIONS = ("tanh", "relu")


@dataclass(frozen=True)
class MLPArchitecture:
    layer_widths: tuple[int, ...] = (2, 64, 64, 2)
    activation: str = "tanh"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 3:
            raise ConfigurationError(f"need at least one hidden layer, got widths {widths}")
        if widths[0] != 2 or widths[-1] != 2:
            raise ConfigurationError(f"input and output width must be 2, got {widths}")
        if any(w <= 0 for w in widths):
            raise ConfigurationError(f"layer widths must be positive, got {widths}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"activation must be one of {ACTIVATIONS}, got {self.activation!r}")

    @property
    def layer_shapes(self) -> list[tuple[int, int]]:
        """(out_width, in_width) per affine layer."""
        w = self.layer_widths
        return [(w[k + 1], w[k]) for k in range(len(w) - 1)]

    @property
    def n_params(self) -> int:
        return sum(o * i + o for o, i in self.layer_shapes)


@dataclass(frozen=True)
class ParamVector:
    values: np.ndarray
    arch: MLPArchitecture
    _layers: list = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).ravel()
        if values.size != self.arch.n_params:
            raise ContractError(
                f"parameter vector has length {values.size}, architecture needs {self.arch.n_params}"
            )
        if not np.all(np.isfinite(values)):
            raise NumericInputError("parameter vector contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "_layers", _split(values, self.arch))

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """Read-only (weight, bias) views in canonical order."""
        return self._layers

    def replace(self, values: np.ndarray) -> "ParamVector":
        return ParamVector(values, self.arch)

    def __eq__(self, other):
        if not isinstance(other, ParamVector):
            return NotImplemented
        return self.arch == other.arch and np.array_equal(self.values, other.values)

    __hash__ = None


def _split(values: np.ndarray, arch: MLPArchitecture):
    layers = []
    offset = 0
    for out_w, in_w in arch.layer_shapes:
        W = values[offset: offset + out_w * in_w].reshape(out_w, in_w)
        offset += out_w * in_w
        b = values[offset: offset + out_w]
        offset += out_w
        layers.append((W, b))
    return layers


def init_params(arch: MLPArchitecture, seed: int) -> ParamVector:
    """Glorot-uniform weights, zero biases, fully determined by ``seed``."""
    if not isinstance(arch, MLPArchitecture):
        arch = MLPArchitecture(*arch)
    rng = np.random.default_rng(seed)
    chunks = []
    for out_w, in_w in arch.layer_shapes:
        limit = np.sqrt(6.0 / (in_w + out_w))
        chunks.append(rng.uniform(-limit, limit, size=out_w * in_w))
        chunks.append(np.zeros(out_w))
    return ParamVector(np.concatenate(chunks), arch)


def _as_batch(x) -> tuple[np.ndarray, bool]:
    X = np.asarray(x, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != 2:
        raise ContractError(f"expected points of shape (2,) or (B, 2), got {np.shape(x)}")
    if not np.all(np.isfinite(X)):
        raise NumericInputError("non-finite input point")
    return X, single


def forward_cached(p: ParamVector, X: np.ndarray):
    """Batched forward pass returning the output and the activations the reverse pass needs."""
    layers = p.layers()
    relu = p.arch.activation == "relu"
    acts = [X]
    a = X
    for W, b in layers[:-1]:
        z = a @ W.T + b
        a = np.maximum(z, 0.0) if relu else np.tanh(z)
        acts.append(a)
    W, b = layers[-1]
    return a @ W.T + b, acts


def backward(p: ParamVector, acts, cot: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Reverse pass for ``forward_cached``; parameter gradients are summed over the batch."""
    layers = p.layers()
    relu = p.arch.activation == "relu"
    grads = []
    g = cot
    for k in range(len(layers) - 1, -1, -1):
        W, _ = layers[k]
        a_in = acts[k]
        grads.append(g.sum(axis=0))
        grads.append((g.T @ a_in).ravel())
        g = g @ W
        if k > 0:
            if relu:
                g = g * (a_in > 0.0)
            else:
                g = g * (1.0 - a_in * a_in)
    grads.reverse()
    return np.concatenate(grads), g


def mlp_forward(p: ParamVector, x) -> np.ndarray:
    """Unnormalized network output for one point or a batch."""
    X, single = _as_batch(x)
    out, _ = forward_cached(p, X)
    return out[0] if single else out


def mlp_vjp(p: ParamVector, x, cotangent) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(cᵀ ∂g/∂params, cᵀ ∂g/∂x)``.

    For a batch, parameter gradients are summed over the batch and input
    gradients are returned per point.
    """
    X, single = _as_batch(x)
    C = np.asarray(cotangent, dtype=np.float64).reshape(X.shape)
    if not np.all(np.isfinite(C)):
        raise NumericInputError("non-finite cotangent")
    _, acts = forward_cached(p, X)
    gp, gx = backward(p, acts, C)
    return gp, (gx[0] if single else gx)


def save_checkpoint(p: ParamVector, path) -> None:
    doc = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "layer_widths": list(p.arch.layer_widths),
        "activation": p.arch.activation,
        # repr of a Python float round-trips exactly
        "values": [float(v) for v in p.values],
    }
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_checkpoint(path) -> ParamVector:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a JSON checkpoint ({exc})") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path}: checkpoint must be a JSON object")
    missing = {"format_version", "layer_widths", "activation", "values"} - doc.keys()
    if missing:
        raise FormatError(f"{path}: checkpoint missing fields {sorted(missing)}")
    if doc["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {doc['format_version']}")
    try:
        arch = MLPArchitecture(tuple(doc["layer_widths"]), doc["activation"])
        return ParamVector(np.array(doc["values"], dtype=np.float64), arch)
    except (ConfigurationError, ContractError, NumericInputError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: invalid checkpoint ({exc})") from exc

