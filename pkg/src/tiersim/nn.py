"""Minimal dense network: hand-rolled forward, backprop, and SGD.

Sized for the placement task (6 -> 20 -> 30 -> heads) with swish hidden
activations and identity outputs. Weights live in float64; the half-precision
checkpoint variant exists for overhead accounting. No autograd framework is
involved; gradients are verified against finite differences in the tests.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO, Sequence

import numpy as np


class DimensionMismatch(ValueError):
    pass


class TopologyMismatch(ValueError):
    pass


def sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def swish(z: np.ndarray) -> np.ndarray:
    return z * sigmoid(z)


def swish_grad(z: np.ndarray) -> np.ndarray:
    s = sigmoid(z)
    return s + z * s * (1.0 - s)


_ACTIVATIONS = ("swish", "identity")


@dataclass
class DenseLayer:
    weights: np.ndarray  # (out, in)
    biases: np.ndarray   # (out,)
    activation: str

    def __post_init__(self) -> None:
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]


class Network:
    """An ordered stack of dense layers."""

    def __init__(self, layers: list[DenseLayer]) -> None:
        for a, b in zip(layers, layers[1:]):
            if a.out_dim != b.in_dim:
                raise TopologyMismatch(
                    f"layer output {a.out_dim} does not feed layer input {b.in_dim}")
        self.layers = layers

    @classmethod
    def create(cls, dims: Sequence[int], rng: np.random.Generator,
               output_activation: str = "identity") -> "Network":
        """Random init: uniform in +-1/sqrt(fan_in), swish hidden layers."""
        if len(dims) < 2:
            raise TopologyMismatch("need at least input and output dims")
        layers = []
        for i, (d_in, d_out) in enumerate(zip(dims, dims[1:])):
            bound = 1.0 / np.sqrt(d_in)
            w = rng.uniform(-bound, bound, size=(d_out, d_in))
            b = rng.uniform(-bound, bound, size=d_out)
            act = output_activation if i == len(dims) - 2 else "swish"
            layers.append(DenseLayer(w, b, act))
        return cls(layers)

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.layers[0].in_dim, *(l.out_dim for l in self.layers))

    @property
    def input_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.layers[-1].out_dim

    def forward(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.input_dim,):
            raise DimensionMismatch(f"expected input shape ({self.input_dim},), got {x.shape}")
        a = x
        for layer in self.layers:
            z = layer.weights @ a + layer.biases
            a = swish(z) if layer.activation == "swish" else z
        return a

    def forward_batch(self, xs: np.ndarray) -> np.ndarray:
        xs = np.asarray(xs, dtype=np.float64)
        if xs.ndim != 2 or xs.shape[1] != self.input_dim:
            raise DimensionMismatch(f"expected (batch, {self.input_dim}), got {xs.shape}")
        a = xs
        for layer in self.layers:
            z = a @ layer.weights.T + layer.biases
            a = swish(z) if layer.activation == "swish" else z
        return a

    def backward(self, x: np.ndarray, grad_out: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Gradients of grad_out . output w.r.t. every weight and bias."""
        grads = self.backward_batch(np.asarray(x, dtype=np.float64)[None, :],
                                    np.asarray(grad_out, dtype=np.float64)[None, :])
        return grads

    def backward_batch(self, xs: np.ndarray,
                       grad_out: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
        """Backprop a batch; gradients are summed over the batch rows."""
        xs = np.asarray(xs, dtype=np.float64)
        grad_out = np.asarray(grad_out, dtype=np.float64)
        if grad_out.shape != (xs.shape[0], self.output_dim):
            raise DimensionMismatch(
                f"expected grad shape ({xs.shape[0]}, {self.output_dim}), got {grad_out.shape}")
        # forward, remembering pre-activations and activations
        acts = [xs]
        pre: list[np.ndarray] = []
        a = xs
        for layer in self.layers:
            z = a @ layer.weights.T + layer.biases
            pre.append(z)
            a = swish(z) if layer.activation == "swish" else z
            acts.append(a)
        grads: list[tuple[np.ndarray, np.ndarray]] = [None] * len(self.layers)  # type: ignore
        delta = grad_out
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            if layer.activation == "swish":
                delta = delta * swish_grad(pre[i])
            grads[i] = (delta.T @ acts[i], delta.sum(axis=0))
            if i > 0:
                delta = delta @ layer.weights
        return grads

    def sgd_step(self, grads: list[tuple[np.ndarray, np.ndarray]], alpha: float) -> None:
        if alpha < 0:
            raise ValueError("alpha must be >= 0")
        if len(grads) != len(self.layers):
            raise TopologyMismatch("gradient list does not match layer count")
        for layer, (dw, db) in zip(self.layers, grads):
            layer.weights -= alpha * dw
            layer.biases -= alpha * db


def copy_weights(src: Network, dst: Network) -> None:
    """Deep-copy parameters from src into dst; topologies must match."""
    if src.dims != dst.dims:
        raise TopologyMismatch(f"cannot copy {src.dims} into {dst.dims}")
    for s, d in zip(src.layers, dst.layers):
        if s.activation != d.activation:
            raise TopologyMismatch("activation mismatch")
        np.copyto(d.weights, s.weights)
        np.copyto(d.biases, s.biases)


def weight_count(net: Network | Sequence[int]) -> int:
    """Number of weights (biases excluded): sum over layers of in*out."""
    dims = net.dims if isinstance(net, Network) else tuple(net)
    return sum(a * b for a, b in zip(dims, dims[1:]))


def mac_count(net: Network | Sequence[int]) -> int:
    """Multiply-accumulate operations per inference: one per weight."""
    return weight_count(net)


def param_count(net: Network) -> int:
    dims = net.dims
    return weight_count(net) + sum(dims[1:])


_MAGIC = b"TNN1"
_ACT_CODE = {name: i for i, name in enumerate(_ACTIVATIONS)}
_DTYPES = {0: "<f8", 1: "<f2"}


def save_checkpoint(net: Network, dest: str | BinaryIO, half: bool = False) -> None:
    """Write a little-endian checkpoint: header, then per-layer weights+biases.

    half=True stores parameters as IEEE half floats (the overhead-accounting
    format); the default keeps full float64 precision.
    """
    if isinstance(dest, str):
        with open(dest, "wb") as fh:
            save_checkpoint(net, fh, half)
            return
    dtype = "<f2" if half else "<f8"
    dest.write(_MAGIC)
    dest.write(struct.pack("<BB", 1 if half else 0, len(net.layers)))
    for layer in net.layers:
        dest.write(struct.pack("<IIB", layer.in_dim, layer.out_dim, _ACT_CODE[layer.activation]))
    for layer in net.layers:
        dest.write(np.ascontiguousarray(layer.weights, dtype=dtype).tobytes())
        dest.write(np.ascontiguousarray(layer.biases, dtype=dtype).tobytes())


def load_checkpoint(source: str | BinaryIO) -> Network:
    if isinstance(source, str):
        with open(source, "rb") as fh:
            return load_checkpoint(fh)
    if source.read(4) != _MAGIC:
        raise ValueError("not a network checkpoint")
    dtype_flag, n_layers = struct.unpack("<BB", source.read(2))
    dtype = np.dtype(_DTYPES[dtype_flag])
    shapes = []
    for _ in range(n_layers):
        d_in, d_out, act = struct.unpack("<IIB", source.read(9))
        shapes.append((d_in, d_out, _ACTIVATIONS[act]))
    layers = []
    for d_in, d_out, act in shapes:
        w = np.frombuffer(source.read(d_out * d_in * dtype.itemsize), dtype=dtype)
        b = np.frombuffer(source.read(d_out * dtype.itemsize), dtype=dtype)
        layers.append(DenseLayer(
            w.astype(np.float64).reshape(d_out, d_in).copy(),
            b.astype(np.float64).copy(), act))
    return Network(layers)


def half_checkpoint_weight_bits(net: Network) -> int:
    """Bits occupied by the weights alone in a half-precision checkpoint."""
    return weight_count(net) * 16
