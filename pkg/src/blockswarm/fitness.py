"""Particle fitness: best held-out accuracy of an early-stopped, Adam-trained single block."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import AugmentationPolicy, Dataset, normalise, split_subset
from .netspec import BlockSpec, MemoryBudget, NetworkGraph, build_network, check_budget
from .trainer import Adam, TrainingDivergence, error_rate, initialize_parameters, train_one_epoch

log = logging.getLogger(__name__)

# roughly a single 8 GB card
DEFAULT_BUDGET = MemoryBudget(max_parameters=50_000_000, max_activation_bytes=8 * 2**30)

OVER_BUDGET = "over_budget"
DIVERGED = "diverged"


@dataclass(frozen=True)
class FitnessConfig:
    patience: int = 5
    max_epochs_cap: int = 50
    split_fraction: float = 0.8
    batch_size: int = 64
    budget: MemoryBudget = DEFAULT_BUDGET
    rng_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must be in (0, 1)")
        if self.patience < 1 or self.max_epochs_cap < 1:
            raise ValueError("patience and max_epochs_cap must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        np.dtype(self.dtype)


@dataclass(frozen=True)
class FitnessResult:
    fitness: float
    epochs_trained: int
    failure: str | None = None
    accuracies: tuple[float, ...] = ()
    capped: bool = False

    def __post_init__(self):
        if self.failure is not None and self.fitness != 0:
            raise ValueError("a failed evaluation must have fitness 0")
        if not 0.0 <= self.fitness <= 1.0:
            raise ValueError("fitness must lie in [0, 1]")


@dataclass
class EarlyStopTrace:
    best: float = 0.0
    best_epoch: int = 0
    epochs: int = 0
    accuracies: list[float] = field(default_factory=list)
    capped: bool = False


def run_early_stopping(train_epoch: Callable[[int], object], evaluate: Callable[[], float],
                       patience: int = 5, max_epochs: int = 50,
                       on_epoch: Callable[[int, float], None] | None = None) -> EarlyStopTrace:
    """Train while ``acc >= acc_best or epoch - epoch_best < patience``.

    Only a strict improvement moves ``epoch_best``, so epochs that tie the best
    accuracy keep training going without resetting the patience window.
    ``max_epochs`` bounds the loop.
    """
    trace = EarlyStopTrace()
    acc, epoch = 0.0, 0
    while acc >= trace.best or epoch - trace.best_epoch < patience:
        if epoch >= max_epochs:
            trace.capped = True
            break
        train_epoch(epoch)
        acc = float(evaluate())
        trace.accuracies.append(acc)
        if acc > trace.best:
            trace.best, trace.best_epoch = acc, epoch
        epoch += 1
        if on_epoch is not None:
            on_epoch(epoch, acc)
    trace.epochs = epoch
    return trace


def train_early_stopped(graph: NetworkGraph, train: Dataset, test: Dataset,
                        config: FitnessConfig,
                        on_epoch: Callable[[int, float], None] | None = None) -> EarlyStopTrace:
    """Adam-train ``graph`` from a fresh He initialisation under the early-stopping rule.

    Inputs are normalised with the training part's channel statistics.
    Raises ``TrainingDivergence`` on a non-finite loss.
    """
    dtype = np.dtype(config.dtype)
    policy = AugmentationPolicy.for_dataset(train)
    x_train = normalise(train.images.astype(dtype), policy)
    x_test = normalise(test.images.astype(dtype), policy)
    params = initialize_parameters(graph, config.rng_seed, dtype)
    optimiser = Adam()
    rng = np.random.default_rng(config.rng_seed)

    def step(epoch):
        train_one_epoch(graph, params, x_train, train.labels, optimiser, config.batch_size,
                        rng, epoch)

    def evaluate():
        return 1.0 - error_rate(graph, params, x_test, test.labels)

    return run_early_stopping(step, evaluate, config.patience, config.max_epochs_cap, on_epoch)


def evaluate_block(spec: BlockSpec, subset: Dataset, config: FitnessConfig,
                   on_epoch: Callable[[int, float], None] | None = None) -> FitnessResult:
    """Fitness of one block: a single-block network trained on an 80/20 split of ``subset``.

    Over-budget blocks and diverging trainings score 0 with a failure tag.
    """
    graph = build_network(spec, 1, subset.image_shape, subset.class_count)
    if not check_budget(graph, config.budget, config.batch_size,
                        np.dtype(config.dtype).itemsize):
        return FitnessResult(0.0, 0, OVER_BUDGET)
    train, test = split_subset(subset, config.split_fraction, config.rng_seed)
    try:
        trace = train_early_stopped(graph, train, test, config, on_epoch)
    except TrainingDivergence as exc:
        log.warning("block %s diverged: %s", spec, exc)
        return FitnessResult(0.0, (exc.epoch or 0) + 1, DIVERGED)
    log.debug("block %s: fitness %.4f after %d epochs", spec, trace.best, trace.epochs)
    return FitnessResult(trace.best, trace.epochs, None, tuple(trace.accuracies), trace.capped)


class SubsetEvaluator:
    """Callable ``BlockSpec -> fitness`` over a fixed subset, keeping every result."""

    def __init__(self, subset: Dataset, config: FitnessConfig):
        self.subset = subset
        self.config = config
        self.results: dict[BlockSpec, FitnessResult] = {}

    def __call__(self, spec: BlockSpec) -> float:
        result = evaluate_block(spec, self.subset, self.config)
        self.results[spec] = result
        return result.fitness
