"""Dense-block architecture search by particle swarm optimisation, with a numpy trainer."""

from .netspec import BlockSpec, MemoryBudget, NetworkGraph, build_network, count_parameters
from .swarm import Bounds, SwarmConfig, evolve

__all__ = ["BlockSpec", "Bounds", "MemoryBudget", "NetworkGraph", "SwarmConfig",
           "build_network", "count_parameters", "evolve"]
__version__ = "0.1.0"
