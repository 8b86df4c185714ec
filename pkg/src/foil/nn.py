"""Minimal dense neural-network engine on top of numpy.

Everything is float64. Inputs may be a single vector of shape ``(in,)`` or a
batch of row vectors of shape ``(n, in)``; outputs follow the same layout.

Random numbers come from numpy's PCG64 bit generator (see :func:`make_rng`),
whose output stream for a given seed is fixed across platforms.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .errors import ConfigError, DataError, NumericError, UsageError

ACTIVATIONS = ("identity", "relu", "tanh")


def make_rng(seed: int) -> np.random.Generator:
    """Seeded PCG64 generator used for every random draw in the package."""
    return np.random.Generator(np.random.PCG64(seed))


def check_finite(arr: np.ndarray, what: str) -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {what}")
    return arr


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activation_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if name == "identity":
        return np.ones_like(pre)
    if name == "relu":
        return (pre > 0.0).astype(np.float64)
    return 1.0 - post * post


@dataclass
class DenseLayer:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray  # (out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ConfigError(
                f"inconsistent layer shapes: weight {self.weight.shape}, bias {self.bias.shape}"
            )

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]


class MlpNetwork:
    """Ordered stack of dense layers."""

    def __init__(self, layers: Sequence[DenseLayer]):
        if not layers:
            raise ConfigError("an MLP needs at least one layer")
        for i in range(1, len(layers)):
            if layers[i].in_dim != layers[i - 1].out_dim:
                raise ConfigError(
                    f"layer {i} expects {layers[i].in_dim} inputs but layer {i - 1} "
                    f"produces {layers[i - 1].out_dim}"
                )
        self.layers: List[DenseLayer] = list(layers)
        self.version = 0

    @classmethod
    def init(
        cls,
        sizes: Sequence[int],
        rng: np.random.Generator,
        activation: str = "relu",
        output_activation: str = "identity",
    ) -> "MlpNetwork":
        """Glorot-uniform weights, zero biases.

        ``sizes`` lists every width including input and output, so
        ``[4, 8, 2]`` builds two layers.
        """
        if len(sizes) < 2 or any(int(s) < 1 for s in sizes):
            raise ConfigError(f"invalid layer sizes {list(sizes)}")
        layers = []
        for i in range(len(sizes) - 1):
            fan_in, fan_out = int(sizes[i]), int(sizes[i + 1])
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            w = rng.uniform(-limit, limit, size=(fan_out, fan_in))
            act = output_activation if i == len(sizes) - 2 else activation
            layers.append(DenseLayer(w, np.zeros(fan_out), act))
        return cls(layers)

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> Dict[str, np.ndarray]:
        """Name -> array mapping; the arrays are the live parameter storage."""
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"{i}.weight"] = layer.weight
            out[f"{i}.bias"] = layer.bias
        return out

    def load_parameters(self, params: Dict[str, np.ndarray]) -> None:
        own = self.parameters()
        if set(own) != set(params):
            raise DataError(f"parameter names differ: {sorted(own)} vs {sorted(params)}")
        for name, arr in params.items():
            if own[name].shape != np.shape(arr):
                raise DataError(f"shape mismatch for {name}: {own[name].shape} vs {np.shape(arr)}")
            own[name][...] = arr
        self.version += 1

    def copy(self) -> "MlpNetwork":
        return MlpNetwork(
            [DenseLayer(l.weight.copy(), l.bias.copy(), l.activation) for l in self.layers]
        )

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]


@dataclass
class ActivationCache:
    """Per-layer inputs and activations recorded by :func:`forward`."""

    net_id: int
    version: int
    vector_input: bool
    inputs: List[np.ndarray] = field(default_factory=list)
    pre: List[np.ndarray] = field(default_factory=list)
    post: List[np.ndarray] = field(default_factory=list)


@dataclass
class ParamGradients:
    params: Dict[str, np.ndarray]
    input: np.ndarray


def forward(net: MlpNetwork, x: np.ndarray):
    x = np.asarray(x, dtype=np.float64)
    vector_input = x.ndim == 1
    h = x[None, :] if vector_input else x
    if h.ndim != 2 or h.shape[1] != net.input_dim:
        raise ConfigError(f"input has shape {x.shape}, network expects {net.input_dim} features")
    tape = ActivationCache(id(net), net.version, vector_input)
    for layer in net.layers:
        tape.inputs.append(h)
        z = h @ layer.weight.T + layer.bias
        h = _activate(layer.activation, z)
        tape.pre.append(z)
        tape.post.append(h)
    check_finite(h, "network output")
    return (h[0] if vector_input else h), tape


def backward(net: MlpNetwork, tape: ActivationCache, grad_out: np.ndarray) -> ParamGradients:
    """Gradients of a scalar loss given dLoss/dy, summed over the batch."""
    if tape.net_id != id(net) or tape.version != net.version or len(tape.pre) != len(net.layers):
        raise UsageError("activation cache does not belong to the current state of this network")
    g = np.asarray(grad_out, dtype=np.float64)
    if tape.vector_input:
        g = g[None, :]
    if g.shape != tape.post[-1].shape:
        raise ConfigError(f"grad_out has shape {np.shape(grad_out)}, expected {tape.post[-1].shape}")
    grads: Dict[str, np.ndarray] = {}
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        dz = g * _activation_grad(layer.activation, tape.pre[i], tape.post[i])
        grads[f"{i}.weight"] = dz.T @ tape.inputs[i]
        grads[f"{i}.bias"] = dz.sum(axis=0)
        g = dz @ layer.weight
    check_finite(g, "input gradient")
    return ParamGradients(grads, g[0] if tape.vector_input else g)


@dataclass
class SgdOptimizer:
    """Plain or heavy-ball SGD: ``v <- m*v + g; p <- p - lr*v``."""

    lr: float
    momentum: float = 0.0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"learning rate must be > 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")

    def step(self, params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray]) -> None:
        for name, p in params.items():
            g = grads[name]
            if np.shape(g) != p.shape:
                raise ConfigError(f"gradient shape {np.shape(g)} does not match parameter {name} {p.shape}")
            check_finite(g, f"gradient of {name}")
            if self.momentum:
                v = self.velocity.get(name)
                v = g.copy() if v is None else self.momentum * v + g
                self.velocity[name] = v
            else:
                v = g
            p -= self.lr * v


def sgd_step(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], opt: SgdOptimizer):
    """Update ``params`` in place and return them."""
    opt.step(params, grads)
    return params


# ---------------------------------------------------------------------------
# Checkpoint format
#
#   magic   8 bytes  b"FOILTNS\x00"
#   version u32      currently 1
#   n       u32      number of tensors
#   mlen    u32      byte length of the UTF-8 JSON metadata block
#   meta    mlen bytes
#   n records of:
#     name_len u16, name (UTF-8), ndim u8, ndim x u64 shape, float64 data (C order)
#
# All integers and floats are little-endian.
# ---------------------------------------------------------------------------
MAGIC = b"FOILTNS\x00"
FORMAT_VERSION = 1


def save_tensors(path, tensors: Dict[str, np.ndarray], meta: dict | None = None) -> None:
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<III", FORMAT_VERSION, len(tensors), len(meta_bytes)), meta_bytes]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_tensors(path):
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise DataError(f"{path}: not a tensor checkpoint (bad magic)")
    version, n, mlen = struct.unpack_from("<III", data, 8)
    if version != FORMAT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    pos = 20
    meta = json.loads(data[pos : pos + mlen].decode("utf-8"))
    pos += mlen
    tensors = {}
    for _ in range(n):
        (name_len,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = struct.unpack_from("<B", data, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", data, pos)
        pos += 8 * ndim
        count = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=pos).reshape(shape)
        pos += 8 * count
        tensors[name] = arr.astype(np.float64)
    return tensors, meta
