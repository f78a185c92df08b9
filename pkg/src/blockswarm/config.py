"""Run configuration: ``key = value`` files with ``#`` comments and command-line overrides.

Defaults reproduce the standard search settings (bounds [6, 32] x [12, 32],
w = 0.7298, c1 = c2 = 1.49618, 20 particles, 20 generations) and the
standard final-training schedule.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

from .data import AugmentationPolicy, Dataset
from .fitness import DEFAULT_BUDGET, FitnessConfig
from .netspec import BlockSpec, MemoryBudget
from .swarm import Bounds, SwarmConfig
from .trainer import SgdSchedule


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    # swarm
    inertia: float = 0.7298
    accel_personal: float = 1.49618
    accel_global: float = 1.49618
    population_size: int = 20
    generations: int = 20
    velocity_cap_fraction: float = 0.5
    seed: int = 0
    # search bounds
    layers_min: int = 6
    layers_max: int = 32
    growth_min: int = 12
    growth_max: int = 32
    # fitness evaluation
    patience: int = 5
    max_epochs_cap: int = 50
    split_fraction: float = 0.8
    batch_size: int = 64
    dtype: str = "float32"
    budget_parameters: int = DEFAULT_BUDGET.max_parameters
    budget_activation_bytes: int = DEFAULT_BUDGET.max_activation_bytes
    # data
    data_root: str = "data"
    train_dataset: str = "cifar10-train"
    test_dataset: str = "cifar10-test"
    subset_fraction: float = 0.1
    # stacking
    compression: float = 1.0
    explore_past_failure: int = 0
    max_stack: int = 0  # 0 means no explicit limit
    # final training
    final_epochs: int = 300
    final_lr: float = 0.1
    final_momentum: float = 0.9
    final_weight_decay: float = 1e-4
    final_batch_size: int = 64
    pad_pixels: int = 4
    crop_size: int = 0  # 0 keeps the input size
    horizontal_flip_probability: float = 0.5
    # distributed evaluation
    bind_host: str = "127.0.0.1"
    bind_port: int = 0
    heartbeat_interval: float = 10.0
    # output
    output_dir: str = "out"

    def __post_init__(self):
        self.validate()

    # --- owning types -----------------------------------------------------------

    def swarm(self) -> SwarmConfig:
        return SwarmConfig(self.inertia, self.accel_personal, self.accel_global,
                           self.population_size, self.generations, self.seed,
                           self.velocity_cap_fraction)

    def bounds(self) -> Bounds:
        return Bounds(self.layers_min, self.layers_max, self.growth_min, self.growth_max)

    def budget(self) -> MemoryBudget:
        return MemoryBudget(self.budget_parameters, self.budget_activation_bytes)

    def fitness(self) -> FitnessConfig:
        return FitnessConfig(self.patience, self.max_epochs_cap, self.split_fraction,
                             self.batch_size, self.budget(), self.seed, self.dtype)

    def schedule(self, epochs: int | None = None) -> SgdSchedule:
        return SgdSchedule(self.final_lr, self.final_momentum, self.final_weight_decay,
                           self.final_epochs if epochs is None else epochs)

    def augmentation(self, train: Dataset | None = None) -> AugmentationPolicy:
        kw = dict(pad_pixels=self.pad_pixels, crop_size=self.crop_size or None,
                  horizontal_flip_probability=self.horizontal_flip_probability)
        if train is None:
            return AugmentationPolicy(**kw)
        return AugmentationPolicy.for_dataset(train, **kw)

    def validate(self) -> None:
        try:
            self.swarm()
            self.bounds()
            self.fitness()
            self.schedule()
            self.augmentation()
            BlockSpec(self.layers_min, self.growth_min)
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None
        if not 0.0 < self.subset_fraction <= 1.0:
            raise ConfigError("subset_fraction must be in (0, 1]")
        if not 0.0 < self.compression <= 1.0:
            raise ConfigError("compression must be in (0, 1]")
        if self.explore_past_failure < 0 or self.max_stack < 0:
            raise ConfigError("explore_past_failure and max_stack must be >= 0")
        if self.final_batch_size < 1 or self.crop_size < 0:
            raise ConfigError("final_batch_size must be >= 1 and crop_size >= 0")
        if self.heartbeat_interval <= 0 or not 0 <= self.bind_port < 65536:
            raise ConfigError("heartbeat_interval must be > 0 and bind_port a valid port")

    # --- text form --------------------------------------------------------------

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def with_overrides(self, pairs: Mapping[str, str] | Iterable[tuple[str, str]]) -> "RunConfig":
        items = pairs.items() if isinstance(pairs, Mapping) else pairs
        return self.replace(**{k: _coerce(k, v) for k, v in items})

    def to_text(self) -> str:
        return "".join(f"{f.name} = {getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def load(cls, path=None, overrides: Mapping[str, str] | None = None) -> "RunConfig":
        pairs: list[tuple[str, str]] = []
        if path is not None:
            try:
                text = Path(path).read_text(encoding="utf-8")
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from None
            pairs = parse_key_values(text, str(path))
        pairs.extend((overrides or {}).items())
        return cls().with_overrides(pairs)


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _coerce(key: str, raw) -> object:
    if key not in _TYPES:
        raise ConfigError(f"unknown config key {key!r}")
    kind = _TYPES[key]
    if not isinstance(raw, str):
        return raw
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind}") from None
    if key == "dtype":
        try:
            np.dtype(raw)
        except TypeError:
            raise ConfigError(f"dtype: unknown type {raw!r}") from None
    return raw


def parse_key_values(text: str, source: str = "<text>") -> list[tuple[str, str]]:
    """``key = value`` lines; blank lines and ``#`` comments are skipped."""
    pairs = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        pairs.append((key.strip(), value.strip()))
    return pairs


# --- hand-off files ------------------------------------------------------------

def write_spec(spec: BlockSpec, path) -> None:
    Path(path).write_text(f"layers = {spec.num_layers}\ngrowth = {spec.growth_rate}\n",
                          encoding="utf-8")


def read_spec(path) -> BlockSpec:
    values = _read_ints(path, ("layers", "growth"))
    try:
        return BlockSpec(values["layers"], values["growth"])
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None


@dataclass(frozen=True)
class Architecture:
    """What the final-training step needs to rebuild the selected network."""

    block: BlockSpec
    stack_count: int
    compression: float = 1.0

    def write(self, path, summary: str = "") -> None:
        lines = [f"layers = {self.block.num_layers}", f"growth = {self.block.growth_rate}",
                 f"stack = {self.stack_count}", f"compression = {self.compression!r}"]
        text = "\n".join(lines) + "\n"
        if summary:
            text += "".join(f"# {line}\n" for line in summary.splitlines())
        Path(path).write_text(text, encoding="utf-8")

    @classmethod
    def read(cls, path) -> "Architecture":
        values = _read_ints(path, ("layers", "growth", "stack"))
        pairs = dict(parse_key_values(Path(path).read_text(encoding="utf-8"), str(path)))
        try:
            return cls(BlockSpec(values["layers"], values["growth"]), values["stack"],
                       float(pairs.get("compression", 1.0)))
        except ValueError as exc:
            raise ConfigError(f"{path}: {exc}") from None


def _read_ints(path, keys) -> dict[str, int]:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from None
    pairs = dict(parse_key_values(text, str(path)))
    out = {}
    for key in keys:
        if key not in pairs:
            raise ConfigError(f"{path}: missing {key!r}")
        try:
            out[key] = int(pairs[key])
        except ValueError:
            raise ConfigError(f"{path}: {key} must be an integer") from None
    return out
