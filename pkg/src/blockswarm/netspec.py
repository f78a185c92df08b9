"""Layer graphs for stacked dense blocks, with parameter and memory accounting.

A network is a stem convolution, ``stack_count`` dense blocks joined by
transition layers (1x1 convolution then 2x2 average pooling), and a
BN -> ReLU -> global-pool -> fully-connected head.  Each composite layer of a
dense block is BN -> ReLU -> 3x3 convolution, and its output is concatenated
onto everything the block has produced so far.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

__all__ = [
    "BlockSpec",
    "Layer",
    "NetworkGraph",
    "MemoryBudget",
    "build_network",
    "count_parameters",
    "activation_bytes",
    "check_budget",
    "max_stack_count",
]


@dataclass(frozen=True, order=True)
class BlockSpec:
    """Hyperparameters of one dense block."""

    num_layers: int
    growth_rate: int

    def __post_init__(self):
        if self.num_layers < 1 or self.growth_rate < 1:
            raise ValueError(f"invalid block {self.num_layers}x{self.growth_rate}")

    def __str__(self):
        return f"layers={self.num_layers} growth={self.growth_rate}"


@dataclass(frozen=True)
class Layer:
    """One node of a network graph.

    ``kind`` is one of ``conv``, ``composite``, ``avgpool``, ``bn``, ``relu``,
    ``gap`` and ``fc``.  For a composite layer ``growth`` is the number of
    channels its convolution emits and ``out_channels`` is the width of the
    concatenated output (``in_channels + growth``).
    """

    kind: str
    name: str
    in_channels: int
    out_channels: int
    in_size: tuple[int, int]
    out_size: tuple[int, int]
    kernel: int = 0
    padding: int = 0
    growth: int = 0

    @property
    def parameters(self) -> int:
        if self.kind == "conv":
            k = self.kernel
            return k * k * self.in_channels * self.out_channels + self.out_channels
        if self.kind == "composite":
            c, g = self.in_channels, self.growth
            return 2 * c + 9 * c * g + g
        if self.kind == "bn":
            return 2 * self.in_channels
        if self.kind == "fc":
            return self.in_channels * self.out_channels + self.out_channels
        return 0

    @property
    def activation_elements(self) -> int:
        """Elements materialised per example by this layer's forward pass."""
        h, w = self.out_size
        if self.kind == "composite":
            hi, wi = self.in_size
            # bn output, relu output, conv output, concatenated output
            inner = (2 * self.in_channels + self.growth) * hi * wi
            return inner + self.out_channels * h * w
        return self.out_channels * h * w

    def describe(self) -> str:
        ih, iw = self.in_size
        oh, ow = self.out_size
        return (f"{self.kind:<9} {self.name:<18} {self.in_channels:>5} -> {self.out_channels:<5} "
                f"{ih}x{iw} -> {oh}x{ow}  params={self.parameters}")


@dataclass(frozen=True)
class NetworkGraph:
    block: BlockSpec
    stack_count: int
    input_shape: tuple[int, int, int]
    num_classes: int
    layers: tuple[Layer, ...]

    @property
    def total_parameters(self) -> int:
        return sum(layer.parameters for layer in self.layers)

    def estimated_activation_memory(self, batch_size: int, element_bytes: int = 4) -> int:
        return activation_bytes(self, batch_size, element_bytes)

    def summary(self) -> str:
        c, h, w = self.input_shape
        lines = [
            f"# block {self.block}, stack {self.stack_count}, input {c}x{h}x{w}, "
            f"classes {self.num_classes}",
        ]
        lines.extend(layer.describe() for layer in self.layers)
        lines.append(f"# total parameters {self.total_parameters}")
        return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class MemoryBudget:
    max_parameters: int
    max_activation_bytes: int

    def __post_init__(self):
        if self.max_parameters < 0 or self.max_activation_bytes < 0:
            raise ValueError("memory budget must be non-negative")


def max_stack_count(spatial: int) -> int:
    """Largest stack count for which every block still sees at least 2x2."""
    count = 1
    while spatial % 2 == 0 and spatial // 2 >= 2:
        spatial //= 2
        count += 1
    return count


def build_network(block: BlockSpec, stack_count: int, input_shape: Sequence[int],
                  num_classes: int, compression: float = 1.0) -> NetworkGraph:
    """Resolve ``block`` stacked ``stack_count`` times into a layer graph.

    Raises ``ValueError`` when a transition would need to halve an odd spatial
    size, or when the last block would run on a map smaller than 2x2.
    """
    if stack_count < 1:
        raise ValueError("stack_count must be >= 1")
    if num_classes < 1:
        raise ValueError("num_classes must be >= 1")
    if not 0.0 < compression <= 1.0:
        raise ValueError("compression must be in (0, 1]")
    c_in, h, w = (int(v) for v in input_shape)
    for _ in range(stack_count - 1):
        if h % 2 or w % 2 or h < 4 or w < 4:
            raise ValueError(
                f"input {input_shape[1]}x{input_shape[2]} cannot hold {stack_count} stacked blocks")
        h, w = h // 2, w // 2

    k = block.growth_rate
    h, w = int(input_shape[1]), int(input_shape[2])
    size = (h, w)
    layers = [Layer("conv", "stem", c_in, 2 * k, size, size, kernel=3, padding=1)]
    channels = 2 * k
    for b in range(1, stack_count + 1):
        for i in range(block.num_layers):
            layers.append(Layer("composite", f"block{b}.layer{i + 1}", channels, channels + k,
                                size, size, kernel=3, padding=1, growth=k))
            channels += k
        if b < stack_count:
            out = max(1, int(channels * compression))
            layers.append(Layer("conv", f"trans{b}.conv", channels, out, size, size, kernel=1))
            half = (size[0] // 2, size[1] // 2)
            layers.append(Layer("avgpool", f"trans{b}.pool", out, out, size, half))
            channels, size = out, half
    layers.append(Layer("bn", "head.bn", channels, channels, size, size))
    layers.append(Layer("relu", "head.relu", channels, channels, size, size))
    layers.append(Layer("gap", "head.gap", channels, channels, size, (1, 1)))
    layers.append(Layer("fc", "head.fc", channels, num_classes, (1, 1), (1, 1)))
    return NetworkGraph(block, stack_count, (c_in, h, w), num_classes, tuple(layers))


def count_parameters(graph: NetworkGraph | Sequence[Layer]) -> int:
    layers = graph.layers if isinstance(graph, NetworkGraph) else graph
    return sum(layer.parameters for layer in layers)


def activation_bytes(graph: NetworkGraph, batch_size: int, element_bytes: int = 4) -> int:
    # forward activations plus one gradient buffer each
    elements = sum(layer.activation_elements for layer in graph.layers)
    return elements * element_bytes * batch_size * 2


def check_budget(graph: NetworkGraph, budget: MemoryBudget, batch_size: int,
                 element_bytes: int = 4) -> bool:
    if graph.total_parameters > budget.max_parameters:
        return False
    return activation_bytes(graph, batch_size, element_bytes) <= budget.max_activation_bytes
