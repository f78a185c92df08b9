"""Inertia-weight particle swarm over the (layers, growth rate) box."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .netspec import BlockSpec

__all__ = [
    "Bounds",
    "SwarmConfig",
    "ParticleState",
    "EvaluationRecord",
    "SwarmHistory",
    "initialize_swarm",
    "update_velocity",
    "update_position",
    "decode_position",
    "evolve",
    "sphere_surrogate",
]

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Bounds:
    layers_min: int = 6
    layers_max: int = 32
    growth_min: int = 12
    growth_max: int = 32

    def __post_init__(self):
        if self.layers_min < 1 or self.growth_min < 1:
            raise ValueError("lower bounds must be >= 1")
        if self.layers_min > self.layers_max or self.growth_min > self.growth_max:
            raise ValueError("lower bound exceeds upper bound")

    @property
    def lower(self) -> np.ndarray:
        return np.array([self.layers_min, self.growth_min], dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return np.array([self.layers_max, self.growth_max], dtype=float)

    @property
    def width(self) -> np.ndarray:
        return self.upper - self.lower

    def grid(self) -> Iterable[BlockSpec]:
        for layers in range(self.layers_min, self.layers_max + 1):
            for growth in range(self.growth_min, self.growth_max + 1):
                yield BlockSpec(layers, growth)


@dataclass(frozen=True)
class SwarmConfig:
    inertia: float = 0.7298
    accel_personal: float = 1.49618
    accel_global: float = 1.49618
    population_size: int = 20
    generations: int = 20
    rng_seed: int = 0
    velocity_cap_fraction: float = 0.5

    def __post_init__(self):
        if self.population_size < 1 or self.generations < 1:
            raise ValueError("population_size and generations must be >= 1")
        if min(self.inertia, self.accel_personal, self.accel_global) < 0:
            raise ValueError("w, c1 and c2 must be non-negative")
        if not 0.0 < self.velocity_cap_fraction <= 1.0:
            raise ValueError("velocity_cap_fraction must be in (0, 1]")


@dataclass
class ParticleState:
    position: np.ndarray
    velocity: np.ndarray
    personal_best_position: np.ndarray
    personal_best_fitness: float = -math.inf


@dataclass(frozen=True)
class EvaluationRecord:
    generation: int
    particle_index: int
    position: tuple[float, float]
    spec: BlockSpec
    fitness: float
    is_global_best: bool = False
    error: str | None = None


@dataclass
class SwarmHistory:
    """Everything a run evaluated, plus the global best after each generation."""

    records: list[EvaluationRecord] = field(default_factory=list)
    best_positions: list[tuple[float, float]] = field(default_factory=list)
    best_fitness: list[float] = field(default_factory=list)
    evaluations: int = 0

    CSV_COLUMNS = ("generation", "particle_index", "pos_layers", "pos_growth",
                   "decoded_layers", "decoded_growth", "fitness", "is_global_best")

    def generation(self, g: int) -> list[EvaluationRecord]:
        return [r for r in self.records if r.generation == g]

    def fitness_table(self) -> dict[BlockSpec, float]:
        return {r.spec: r.fitness for r in self.records}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_COLUMNS)
            for r in self.records:
                writer.writerow([r.generation, r.particle_index, repr(r.position[0]),
                                 repr(r.position[1]), r.spec.num_layers, r.spec.growth_rate,
                                 repr(r.fitness), int(r.is_global_best)])

    @staticmethod
    def read_csv(path) -> list[dict]:
        with open(path, newline="", encoding="utf-8") as fh:
            return list(csv.DictReader(fh))


def initialize_swarm(config: SwarmConfig, bounds: Bounds,
                     rng: np.random.Generator | None = None) -> list[ParticleState]:
    if rng is None:
        rng = np.random.default_rng(config.rng_seed)
    lo, hi = bounds.lower, bounds.upper
    particles = []
    for _ in range(config.population_size):
        pos = lo + rng.random(2) * (hi - lo)
        particles.append(ParticleState(pos, np.zeros(2), pos.copy()))
    return particles


def update_velocity(p: ParticleState, global_best, config: SwarmConfig, r1, r2,
                    bounds: Bounds | None = None) -> np.ndarray:
    """Canonical inertia-weight velocity, clamped per dimension when bounds are given.

    ``global_best`` of ``None`` (nothing evaluated yet) drops the social term.
    """
    x = p.position
    v = config.inertia * p.velocity + config.accel_personal * np.asarray(r1) * (
        p.personal_best_position - x)
    if global_best is not None:
        v = v + config.accel_global * np.asarray(r2) * (np.asarray(global_best, dtype=float) - x)
    if bounds is not None:
        cap = config.velocity_cap_fraction * bounds.width
        v = np.clip(v, -cap, cap)
    return v


def update_position(p: ParticleState, new_velocity, bounds: Bounds) -> np.ndarray:
    return np.clip(p.position + np.asarray(new_velocity, dtype=float), bounds.lower, bounds.upper)


def _round_half_away(x: float) -> int:
    return int(math.copysign(math.floor(abs(x) + 0.5), x))


def decode_position(position, bounds: Bounds | None = None) -> BlockSpec:
    bounds = bounds or Bounds(1, 1 << 30, 1, 1 << 30)
    layers = min(max(_round_half_away(position[0]), bounds.layers_min), bounds.layers_max)
    growth = min(max(_round_half_away(position[1]), bounds.growth_min), bounds.growth_max)
    return BlockSpec(layers, growth)


Evaluator = Callable[[BlockSpec], float]
BatchEvaluator = Callable[[Sequence[BlockSpec]], Sequence[float]]


def _sequential(evaluator: Evaluator) -> BatchEvaluator:
    def run(specs):
        out = []
        for spec in specs:
            try:
                out.append(float(evaluator(spec)))
            except Exception as exc:  # failures count as zero fitness
                log.warning("evaluation of %s failed: %s", spec, exc)
                out.append(exc)
        return out
    return run


def evolve(config: SwarmConfig, bounds: Bounds, evaluator: Evaluator | None = None, *,
           batch_evaluator: BatchEvaluator | None = None,
           on_generation: Callable[[int, SwarmHistory], None] | None = None,
           ) -> tuple[BlockSpec, SwarmHistory]:
    """Run the swarm and return the decoded global best with the full history.

    Each generation first moves every particle (velocity, then position), then
    evaluates the distinct, not-yet-seen decoded positions in one batch, then
    updates personal bests in particle order and finally the global best.
    Because moves only depend on bests from earlier generations this is the
    same as evaluating particle by particle.  ``batch_evaluator`` receives the
    list of uncached specs of a generation and returns one fitness per spec, or
    an exception instance for a spec whose evaluation failed (scored as 0);
    ``evaluator`` is the per-spec form.
    """
    if (evaluator is None) == (batch_evaluator is None):
        raise TypeError("pass exactly one of evaluator or batch_evaluator")
    run_batch = batch_evaluator or _sequential(evaluator)
    rng = np.random.default_rng(config.rng_seed)
    particles = initialize_swarm(config, bounds, rng)
    history = SwarmHistory()
    cache: dict[BlockSpec, float] = {}
    errors: dict[BlockSpec, str] = {}
    gbest_pos: np.ndarray | None = None
    gbest_fit = -math.inf

    for gen in range(config.generations):
        specs = []
        for p in particles:
            r1, r2 = rng.random(2), rng.random(2)
            p.velocity = update_velocity(p, gbest_pos, config, r1, r2, bounds)
            p.position = update_position(p, p.velocity, bounds)
            specs.append(decode_position(p.position, bounds))

        pending = list(dict.fromkeys(s for s in specs if s not in cache))
        if pending:
            values = run_batch(pending)
            if len(values) != len(pending):
                raise RuntimeError("batch evaluator returned the wrong number of results")
            for spec, value in zip(pending, values):
                err = None
                if isinstance(value, BaseException):
                    value, err = 0.0, f"{type(value).__name__}: {value}"
                value = float(value)
                if not math.isfinite(value):
                    value, err = 0.0, "non-finite fitness"
                cache[spec] = value
                if err:
                    errors[spec] = err
            history.evaluations += len(pending)

        fits = [cache[s] for s in specs]
        for p, fit in zip(particles, fits):
            if fit > p.personal_best_fitness:
                p.personal_best_fitness = fit
                p.personal_best_position = p.position.copy()

        winner = None
        for i, fit in enumerate(fits):
            if fit > gbest_fit:
                gbest_fit, winner = fit, i
        if winner is not None:
            gbest_pos = particles[winner].position.copy()

        for i, (p, spec) in enumerate(zip(particles, specs)):
            history.records.append(EvaluationRecord(
                gen, i, (float(p.position[0]), float(p.position[1])), spec, cache[spec],
                is_global_best=(i == winner), error=errors.get(spec)))
        history.best_positions.append((float(gbest_pos[0]), float(gbest_pos[1])))
        history.best_fitness.append(gbest_fit)
        log.info("generation %d: best %s fitness %.4f (%d new evaluations)",
                 gen, decode_position(gbest_pos, bounds), gbest_fit, len(pending))
        if on_generation is not None:
            on_generation(gen, history)

    return decode_position(gbest_pos, bounds), history


def sphere_surrogate(center: tuple[float, float], bounds: Bounds) -> Evaluator:
    """Negative squared distance to ``center``, affinely mapped into [0, 1]."""
    cl, cg = center
    corners = [(a, b) for a in (bounds.layers_min, bounds.layers_max)
               for b in (bounds.growth_min, bounds.growth_max)]
    scale = max((a - cl) ** 2 + (b - cg) ** 2 for a, b in corners) or 1.0

    def fitness(spec: BlockSpec) -> float:
        d2 = (spec.num_layers - cl) ** 2 + (spec.growth_rate - cg) ** 2
        return 1.0 - d2 / scale
    return fitness
