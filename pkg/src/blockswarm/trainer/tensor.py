"""Parameter tensors, He initialisation and the binary checkpoint format."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import BinaryIO

import numpy as np

from ..netspec import NetworkGraph

MAGIC = b"BSWM"
VERSION = 1


@dataclass
class Tensor:
    values: np.ndarray
    grad: np.ndarray | None = None
    trainable: bool = True

    def __post_init__(self):
        if self.grad is not None and self.grad.shape != self.values.shape:
            raise ValueError("grad shape does not match values")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size


ParamStore = dict  # name -> Tensor, in graph order


def _shapes(graph: NetworkGraph):
    """Yield (name, shape, role) for every tensor the graph owns, in order."""
    for layer in graph.layers:
        n = layer.name
        if layer.kind == "conv":
            k = layer.kernel
            yield f"{n}.weight", (layer.out_channels, layer.in_channels, k, k), "weight"
            yield f"{n}.bias", (layer.out_channels,), "bias"
        elif layer.kind == "composite":
            c, g = layer.in_channels, layer.growth
            yield f"{n}.bn.gamma", (c,), "gamma"
            yield f"{n}.bn.beta", (c,), "beta"
            yield f"{n}.bn.running_mean", (c,), "running_mean"
            yield f"{n}.bn.running_var", (c,), "running_var"
            yield f"{n}.conv.weight", (g, c, 3, 3), "weight"
            yield f"{n}.conv.bias", (g,), "bias"
        elif layer.kind == "bn":
            c = layer.in_channels
            yield f"{n}.gamma", (c,), "gamma"
            yield f"{n}.beta", (c,), "beta"
            yield f"{n}.running_mean", (c,), "running_mean"
            yield f"{n}.running_var", (c,), "running_var"
        elif layer.kind == "fc":
            yield f"{n}.weight", (layer.out_channels, layer.in_channels), "weight"
            yield f"{n}.bias", (layer.out_channels,), "bias"


def allocate_parameters(graph: NetworkGraph, dtype=np.float64) -> ParamStore:
    """Zero-filled store holding every tensor of ``graph``.

    Batch-norm running statistics are carried as non-trainable tensors.
    """
    store = {}
    for name, shape, role in _shapes(graph):
        trainable = role not in ("running_mean", "running_var")
        store[name] = Tensor(np.zeros(shape, dtype=dtype), trainable=trainable)
    return store


def trainable_elements(store: ParamStore) -> int:
    return sum(t.size for t in store.values() if t.trainable)


def initialize_parameters(graph: NetworkGraph, rng_seed: int, dtype=np.float64) -> ParamStore:
    """He-normal weights (variance 2 / fan_in), zero biases, unit BN scale."""
    rng = np.random.default_rng(rng_seed)
    store = allocate_parameters(graph, dtype)
    for name, t in store.items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(t.shape[1:]))
            t.values[...] = rng.standard_normal(t.shape) * np.sqrt(2.0 / fan_in)
        elif name.endswith("gamma") or name.endswith("running_var"):
            t.values[...] = 1.0
    return store


def decays(name: str) -> bool:
    """Weight decay applies to convolution and fully-connected weights only."""
    return name.endswith(".weight")


def copy_store(store: ParamStore) -> ParamStore:
    return {k: Tensor(t.values.copy(), trainable=t.trainable) for k, t in store.items()}


def write_checkpoint(store: ParamStore, fh: BinaryIO) -> None:
    """Serialise ``store``; elements are always written as little-endian float64."""
    fh.write(MAGIC)
    fh.write(struct.pack("<II", VERSION, len(store)))
    for name, t in store.items():
        raw = name.encode("utf-8")
        fh.write(struct.pack("<H", len(raw)))
        fh.write(raw)
        fh.write(struct.pack("<B", t.values.ndim))
        fh.write(struct.pack(f"<{t.values.ndim}I", *t.values.shape))
        fh.write(np.ascontiguousarray(t.values, dtype="<f8").tobytes())


def read_checkpoint(fh: BinaryIO, dtype=np.float64) -> ParamStore:
    def take(n):
        buf = fh.read(n)
        if len(buf) != n:
            raise ValueError("truncated checkpoint")
        return buf

    if take(4) != MAGIC:
        raise ValueError("not a checkpoint file")
    version, count = struct.unpack("<II", take(8))
    if version != VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    store = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = take(nlen).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        n = int(np.prod(dims)) if rank else 1
        values = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(dtype)
        store[name] = Tensor(values, trainable="running_" not in name)
    return store


def save_checkpoint(store: ParamStore, path) -> None:
    with open(path, "wb") as fh:
        write_checkpoint(store, fh)


def load_checkpoint(path, dtype=np.float64) -> ParamStore:
    with open(path, "rb") as fh:
        return read_checkpoint(fh, dtype)
