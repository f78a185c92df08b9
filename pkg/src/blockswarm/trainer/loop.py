"""Epoch loop: shuffled minibatches, optimiser steps and error curves."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable

import numpy as np

from ..netspec import NetworkGraph
from .model import TrainingDivergence, backward, predict
from .tensor import ParamStore


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    train_error: float
    eval_error: float


def train_one_epoch(graph: NetworkGraph, params: ParamStore, images, labels, optimiser,
                    batch_size: int, rng: np.random.Generator, epoch: int = 0,
                    transform: Callable | None = None) -> tuple[float, float]:
    """One pass over the data; returns ``(mean loss, training error)``."""
    n = len(images)
    order = rng.permutation(n)
    total_loss, wrong = 0.0, 0
    for b, start in enumerate(range(0, n, batch_size)):
        idx = order[start:start + batch_size]
        x = images[idx]
        if transform is not None:
            x = transform(x, rng)
        try:
            # overflow shows up as a non-finite loss, reported below
            with np.errstate(over="ignore", invalid="ignore"):
                loss, grads, logits = backward(graph, params, x, labels[idx], track_stats=True)
        except TrainingDivergence as exc:
            raise TrainingDivergence(
                f"training diverged at epoch {epoch}, batch {b}: {exc}", epoch, b) from None
        optimiser.step(params, grads, epoch)
        total_loss += loss * len(idx)
        wrong += int((logits.argmax(axis=1) != labels[idx]).sum())
    return total_loss / max(n, 1), wrong / max(n, 1)


def error_rate(graph: NetworkGraph, params: ParamStore, images, labels,
               batch_size: int = 256) -> float:
    if len(images) == 0:
        return 0.0
    return float((predict(graph, params, images, batch_size) != labels).mean())


def train_epochs(graph: NetworkGraph, params: ParamStore, train_images, train_labels,
                 eval_images, eval_labels, optimiser, epochs: int, batch_size: int = 64,
                 rng_seed: int = 0, transform: Callable | None = None,
                 on_epoch: Callable[[EpochStats], None] | None = None) -> list[EpochStats]:
    if len(train_images) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(rng_seed)
    curves = []
    for epoch in range(epochs):
        loss, train_err = train_one_epoch(graph, params, train_images, train_labels, optimiser,
                                          batch_size, rng, epoch, transform)
        stats = EpochStats(epoch, loss, train_err,
                           error_rate(graph, params, eval_images, eval_labels))
        curves.append(stats)
        if on_epoch is not None:
            on_epoch(stats)
    return curves


def write_curves(curves: list[EpochStats], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "train_error", "eval_error"])
        for s in curves:
            writer.writerow([s.epoch, repr(s.train_loss), repr(s.train_error), repr(s.eval_error)])
