"""Progressive stacking: grow the evolved block one copy at a time and keep the best."""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .data import Dataset, split_subset
from .fitness import FitnessConfig, train_early_stopped
from .netspec import BlockSpec, MemoryBudget, NetworkGraph, build_network, check_budget
from .trainer import TrainingDivergence

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StackCandidate:
    stack_count: int
    graph: NetworkGraph
    held_out_accuracy: float | None = None
    over_budget: bool = False
    diverged: bool = False

    def __post_init__(self):
        if self.over_budget and self.held_out_accuracy is not None:
            raise ValueError("an over-budget candidate is never trained")

    @property
    def parameters(self) -> int:
        return self.graph.total_parameters


CandidateTrainer = Callable[[NetworkGraph], float]


def stack_and_select(block: BlockSpec, full_training_set: Dataset, config: FitnessConfig,
                     budget: MemoryBudget | None = None, *,
                     trainer: CandidateTrainer | None = None,
                     explore_past_failure: int = 0, compression: float = 1.0,
                     max_stack: int | None = None,
                     ) -> tuple[StackCandidate | None, list[StackCandidate]]:
    """Stack ``block`` 1, 2, 3, ... times until accuracy stops strictly improving.

    Each candidate is trained with Adam under the fitness early-stopping rule
    on one fixed 80/20 split of ``full_training_set``.  The loop also ends,
    before any training, when a candidate breaks ``budget`` or the input is too
    small to hold another block.  ``explore_past_failure`` trains exactly that
    many further candidates after the first non-improvement.  ``trainer`` replaces
    the training step (graph -> held-out accuracy).

    Returns the best candidate (``None`` if nothing could be trained) and
    every candidate considered, in order.
    """
    budget = budget or config.budget
    element_bytes = np.dtype(config.dtype).itemsize
    if trainer is None:
        train, test = split_subset(full_training_set, config.split_fraction, config.rng_seed)

        def trainer(graph):
            return train_early_stopped(graph, train, test, config).best

    best: StackCandidate | None = None
    candidates: list[StackCandidate] = []
    extras_left = None  # set at the first non-improvement
    i = 0
    while max_stack is None or i < max_stack:
        i += 1
        try:
            graph = build_network(block, i, full_training_set.image_shape,
                                  full_training_set.class_count, compression)
        except ValueError as exc:
            log.info("stopping at stack %d: %s", i, exc)
            break
        if not check_budget(graph, budget, config.batch_size, element_bytes):
            log.info("stopping at stack %d: over memory budget", i)
            candidates.append(StackCandidate(i, graph, None, over_budget=True))
            break
        try:
            acc = float(trainer(graph))
        except TrainingDivergence as exc:
            log.warning("stack %d diverged: %s", i, exc)
            candidates.append(StackCandidate(i, graph, None, diverged=True))
            break
        candidate = StackCandidate(i, graph, acc)
        candidates.append(candidate)
        log.info("stack %d: %d parameters, accuracy %.4f", i, graph.total_parameters, acc)
        if acc > (best.held_out_accuracy if best else 0.0):
            best = candidate
        elif extras_left is None:
            extras_left = explore_past_failure
            if extras_left == 0:
                break
            continue
        if extras_left is not None:
            extras_left -= 1
            if extras_left <= 0:
                break
    return best, candidates


def write_candidates(candidates: list[StackCandidate], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["stack_count", "parameters", "accuracy", "over_budget"])
        for c in candidates:
            acc = "" if c.held_out_accuracy is None else repr(c.held_out_accuracy)
            writer.writerow([c.stack_count, c.parameters, acc, int(c.over_budget)])
