"""Command-line pipeline: synth, evolve, stack, train-final, transfer, run, ttest, describe, worker.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import disteval
from .config import Architecture, ConfigError, RunConfig, read_spec, write_spec
from .data import (
    Dataset,
    ParseError,
    SubsetError,
    augment,
    normalise,
    resolve_dataset,
    sample_subset,
    synth_pair,
)
from .fitness import FitnessResult, SubsetEvaluator
from .netspec import BlockSpec, build_network
from .stacker import StackCandidate, stack_and_select, write_candidates
from .stats import student_ttest
from .swarm import SwarmHistory, evolve, sphere_surrogate
from .trainer import (
    NesterovSGD,
    TrainingDivergence,
    initialize_parameters,
    save_checkpoint,
    train_epochs,
    write_curves,
)

log = logging.getLogger("blockswarm")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

HISTORY_CSV = "history.csv"
EVALUATIONS_CSV = "evaluations.csv"
SPEC_FILE = "block.txt"
CANDIDATES_CSV = "candidates.csv"
ARCH_FILE = "architecture.txt"
CHECKPOINT = "final.ckpt"
CURVES_CSV = "curves.csv"
SUMMARY_JSON = "summary.json"


class DataError(RuntimeError):
    pass


@dataclass
class RunSummary:
    evolved_spec: dict | None = None
    stack_count: int | None = None
    final_parameters: int | None = None
    final_test_error: float | None = None
    dataset: str | None = None
    phase_seconds: dict = field(default_factory=dict)

    @classmethod
    def load(cls, out_dir) -> "RunSummary":
        path = Path(out_dir) / SUMMARY_JSON
        if not path.exists():
            return cls()
        return cls(**json.loads(path.read_text(encoding="utf-8")))

    def save(self, out_dir) -> None:
        Path(out_dir, SUMMARY_JSON).write_text(json.dumps(asdict(self), indent=2) + "\n",
                                               encoding="utf-8")


def _out(config: RunConfig) -> Path:
    path = Path(config.output_dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _dataset(config: RunConfig, name: str) -> Dataset:
    try:
        return resolve_dataset(config.data_root, name)
    except (OSError, ParseError) as exc:
        raise DataError(str(exc)) from None


def _record_phase(config: RunConfig, phase: str, seconds: float, **fields) -> RunSummary:
    summary = RunSummary.load(config.output_dir)
    summary.phase_seconds[phase] = seconds
    for key, value in fields.items():
        setattr(summary, key, value)
    summary.save(config.output_dir)
    return summary


# --- phases --------------------------------------------------------------------

def write_evaluations(results: dict[BlockSpec, FitnessResult], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layers", "growth", "fitness", "epochs_trained", "failure"])
        for spec, r in results.items():
            writer.writerow([spec.num_layers, spec.growth_rate, repr(r.fitness),
                             r.epochs_trained, r.failure or ""])


def _spawn_workers(count: int, address, data_root) -> list[subprocess.Popen]:
    cmd = [sys.executable, "-m", "blockswarm", "worker", "--server",
           f"{address[0]}:{address[1]}", "--data-root", str(data_root)]
    return [subprocess.Popen(cmd) for _ in range(count)]


def cmd_evolve(config: RunConfig, distributed: bool = False, spawn_workers: int = 0,
               fitness: str = "train", sphere_center: tuple[float, float] | None = None,
               ) -> tuple[BlockSpec, SwarmHistory]:
    """Sample the subset, run the swarm over it and write the history and spec files."""
    out = _out(config)
    start = time.perf_counter()
    bounds = config.bounds()
    results: dict[BlockSpec, FitnessResult] = {}
    if fitness == "sphere":
        if sphere_center is None:
            sphere_center = ((bounds.layers_min + bounds.layers_max) / 2,
                             (bounds.growth_min + bounds.growth_max) / 2)
        spec, history = evolve(config.swarm(), bounds, sphere_surrogate(sphere_center, bounds))
    elif distributed:
        ref = disteval.SubsetRef(config.train_dataset, config.seed, config.subset_fraction)
        disteval.load_subset(config.data_root, ref)  # fail fast when the data is missing
        server = disteval.EvalServer((config.bind_host, config.bind_port),
                                     config.heartbeat_interval).start()
        print(f"evaluation server listening on {server.address[0]}:{server.address[1]}",
              flush=True)
        procs = _spawn_workers(spawn_workers, server.address, config.data_root)
        try:
            evaluator = disteval.DistributedEvaluator(server, ref, config.fitness())
            spec, history = evolve(config.swarm(), bounds, batch_evaluator=evaluator)
            results = evaluator.results
        finally:
            server.close()
            for p in procs:
                try:
                    p.wait(timeout=30)
                except subprocess.TimeoutExpired:
                    p.kill()
    else:
        train = _dataset(config, config.train_dataset)
        try:
            subset = sample_subset(train, config.subset_fraction, config.seed)
        except SubsetError as exc:
            raise DataError(str(exc)) from None
        evaluator = SubsetEvaluator(subset, config.fitness())
        spec, history = evolve(config.swarm(), bounds, evaluator)
        results = evaluator.results
    history.write_csv(out / HISTORY_CSV)
    if results:
        write_evaluations(results, out / EVALUATIONS_CSV)
    write_spec(spec, out / SPEC_FILE)
    _record_phase(config, "evolve", time.perf_counter() - start,
                  evolved_spec={"layers": spec.num_layers, "growth": spec.growth_rate})
    log.info("evolved block %s (fitness %.4f)", spec, history.best_fitness[-1])
    return spec, history


def cmd_stack(config: RunConfig, spec: BlockSpec | str | os.PathLike,
              dataset: str | None = None) -> tuple[StackCandidate, list[StackCandidate]]:
    """Stack the block on the full training set; writes candidates CSV and architecture file."""
    out = _out(config)
    start = time.perf_counter()
    block = spec if isinstance(spec, BlockSpec) else read_spec(spec)
    train = _dataset(config, dataset or config.train_dataset)
    best, candidates = stack_and_select(
        block, train, config.fitness(), config.budget(),
        explore_past_failure=config.explore_past_failure, compression=config.compression,
        max_stack=config.max_stack or None)
    write_candidates(candidates, out / CANDIDATES_CSV)
    if best is None:
        if candidates and candidates[-1].diverged:
            raise TrainingDivergence("every stacked candidate diverged")
        raise ConfigError(f"no stack of {block} fits the memory budget or input size")
    Architecture(block, best.stack_count, config.compression).write(
        out / ARCH_FILE, best.graph.summary())
    _record_phase(config, "stack", time.perf_counter() - start, stack_count=best.stack_count)
    log.info("selected stack %d (%d parameters)", best.stack_count, best.parameters)
    return best, candidates


def cmd_train_final(config: RunConfig, architecture: Architecture | str | os.PathLike,
                    epochs: int | None = None, dry_run: bool = False,
                    train_name: str | None = None, test_name: str | None = None):
    """Retrain the selected network from scratch with scheduled Nesterov SGD and augmentation.

    Returns the per-epoch curves, or the schedule table for a dry run.
    """
    epochs = config.final_epochs if epochs is None else epochs
    schedule = config.schedule(epochs)
    if dry_run:
        for first, end, lr in schedule.table():
            print(f"epochs {first}-{end - 1}: lr {lr:g}")
        return schedule.table()
    arch = architecture if isinstance(architecture, Architecture) else Architecture.read(architecture)
    out = _out(config)
    start = time.perf_counter()
    train = _dataset(config, train_name or config.train_dataset)
    test = _dataset(config, test_name or config.test_dataset)
    if test.class_count != train.class_count or test.image_shape != train.image_shape:
        raise DataError("test set does not match the training set's classes or image shape")
    dtype = np.dtype(config.dtype)
    graph = build_network(arch.block, arch.stack_count, train.image_shape, train.class_count,
                          arch.compression)
    params = initialize_parameters(graph, config.seed, dtype)
    policy = config.augmentation(train)

    def transform(x, rng):
        return augment(x, policy, rng)

    def report(s):
        log.info("epoch %d: loss %.4f train error %.4f test error %.4f",
                 s.epoch, s.train_loss, s.train_error, s.eval_error)

    curves = train_epochs(graph, params, train.images.astype(dtype), train.labels,
                          normalise(test.images.astype(dtype), policy), test.labels,
                          NesterovSGD(schedule), epochs, config.final_batch_size, config.seed,
                          transform, report)
    write_curves(curves, out / CURVES_CSV)
    save_checkpoint(params, out / CHECKPOINT)
    _record_phase(config, "train", time.perf_counter() - start,
                  final_parameters=graph.total_parameters,
                  final_test_error=curves[-1].eval_error, dataset=train.name)
    return curves


def cmd_transfer(config: RunConfig, spec: BlockSpec | str | os.PathLike, train_name: str,
                 test_name: str, epochs: int | None = None) -> RunSummary:
    """Stack and retrain an already evolved block on another dataset, without any search."""
    block = spec if isinstance(spec, BlockSpec) else read_spec(spec)
    config = config.replace(train_dataset=train_name, test_dataset=test_name)
    _out(config)
    RunSummary(evolved_spec={"layers": block.num_layers, "growth": block.growth_rate},
               phase_seconds={"evolve": 0.0}).save(config.output_dir)
    write_spec(block, Path(config.output_dir) / SPEC_FILE)
    best, _ = cmd_stack(config, block)
    cmd_train_final(config, Architecture(block, best.stack_count, config.compression), epochs)
    return RunSummary.load(config.output_dir)


def cmd_run(config: RunConfig, epochs: int | None = None, **evolve_kw) -> RunSummary:
    """The whole pipeline: evolve, stack, then final training."""
    _out(config)
    RunSummary().save(config.output_dir)
    spec, _ = cmd_evolve(config, **evolve_kw)
    best, _ = cmd_stack(config, spec)
    cmd_train_final(config, Architecture(spec, best.stack_count, config.compression), epochs)
    return RunSummary.load(config.output_dir)


def read_sample(path) -> list[float]:
    """Numbers from the last column of a CSV; a non-numeric first row is a header."""
    values = []
    with open(path, newline="", encoding="utf-8") as fh:
        for i, row in enumerate(csv.reader(fh)):
            if not row or not "".join(row).strip():
                continue
            try:
                values.append(float(row[-1]))
            except ValueError:
                if i == 0:
                    continue
                raise ConfigError(f"{path}: row {i + 1} is not numeric") from None
    return values


def cmd_ttest(sample_a, sample_b):
    a = read_sample(sample_a) if isinstance(sample_a, (str, os.PathLike)) else list(sample_a)
    b = read_sample(sample_b) if isinstance(sample_b, (str, os.PathLike)) else list(sample_b)
    try:
        return student_ttest(a, b)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


# --- argument parsing -------------------------------------------------------------

def _key_value(text: str) -> tuple[str, str]:
    key, sep, value = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    return key.strip(), value.strip()


def _address(text: str) -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep or not port.isdigit():
        raise argparse.ArgumentTypeError(f"expected host:port, got {text!r}")
    return host or "127.0.0.1", int(port)


def _pair(text: str) -> tuple[float, float]:
    try:
        a, b = (float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}")
    return a, b


# command-line flags that map straight onto config keys
_FLAG_KEYS = {
    "generations": "generations", "population": "population_size", "seed": "seed",
    "out": "output_dir", "data_root": "data_root", "dataset": "train_dataset",
    "test_dataset": "test_dataset", "subset_fraction": "subset_fraction",
}


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--set", dest="overrides", action="append", type=_key_value, default=[],
                   metavar="KEY=VALUE", help="override one config key (repeatable)")
    p.add_argument("--out", help="output directory")
    p.add_argument("--data-root", help="directory holding the dataset files")
    p.add_argument("--dataset", help="training dataset name")
    p.add_argument("--test-dataset", help="test dataset name")
    p.add_argument("--seed", type=int)
    p.add_argument("--subset-fraction", type=float)


def _evolve_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--generations", type=int)
    p.add_argument("--population", type=int)
    p.add_argument("--distributed", action="store_true",
                   help="evaluate fitness on remote workers")
    p.add_argument("--spawn-workers", type=int, default=0, metavar="N",
                   help="with --distributed, start N local worker processes")
    p.add_argument("--fitness", choices=("train", "sphere"), default="train",
                   help="'sphere' swaps training for a quadratic surrogate")
    p.add_argument("--sphere-center", type=_pair, metavar="L,G")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="blockswarm",
                                     description="Dense-block search by particle swarm.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic train/test dataset pair")
    p.add_argument("--out", default="data")
    p.add_argument("--name", default="synth")
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--per-class", type=int, default=200)
    p.add_argument("--test-per-class", type=int, default=50)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--difficulty", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--variant", type=int, default=0)

    p = sub.add_parser("evolve", help="search for the block on a training subset")
    _config_args(p)
    _evolve_args(p)

    p = sub.add_parser("stack", help="stack an evolved block and select the depth")
    _config_args(p)
    p.add_argument("--spec", required=True, help="block spec file")

    p = sub.add_parser("train-final", help="retrain the selected network from scratch")
    _config_args(p)
    p.add_argument("--arch", help="architecture file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--dry-run", action="store_true", help="print the learning-rate schedule")

    p = sub.add_parser("transfer", help="stack and train an existing block on a new dataset")
    _config_args(p)
    p.add_argument("--spec", required=True)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("run", help="evolve, stack and train in one go")
    _config_args(p)
    _evolve_args(p)
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("ttest", help="pooled two-sample Student's t-test")
    p.add_argument("sample_a")
    p.add_argument("sample_b")

    p = sub.add_parser("describe", help="print the layer table of a network")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--spec")
    g.add_argument("--arch")
    p.add_argument("--stack", type=int, default=1)
    p.add_argument("--input", default="3x32x32", help="CxHxW")
    p.add_argument("--classes", type=int, default=10)

    p = sub.add_parser("worker", help="evaluate fitness jobs for a remote search")
    p.add_argument("--server", type=_address, required=True, metavar="HOST:PORT")
    p.add_argument("--data-root", required=True)
    p.add_argument("--id", dest="worker_id")

    sub.add_parser("config", help="print every config key with its default")
    return parser


def _load_config(args) -> RunConfig:
    overrides = dict(args.overrides)
    for attr, key in _FLAG_KEYS.items():
        value = getattr(args, attr, None)
        if value is not None:
            overrides[key] = value
    return RunConfig.load(args.config, overrides)


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "synth":
        paths = synth_pair(args.out, args.name, args.classes, args.per_class,
                           args.test_per_class, args.size, args.difficulty, args.seed,
                           args.variant)
        for path in paths:
            print(path)
        return EXIT_OK
    if cmd == "config":
        sys.stdout.write(RunConfig().to_text())
        return EXIT_OK
    if cmd == "ttest":
        r = cmd_ttest(args.sample_a, args.sample_b)
        print(f"t = {r.t:.6g}\ndf = {r.df}\np = {r.p:.6g}")
        return EXIT_OK
    if cmd == "describe":
        if args.arch:
            arch = Architecture.read(args.arch)
        else:
            arch = Architecture(read_spec(args.spec), args.stack)
        try:
            shape = tuple(int(v) for v in args.input.lower().split("x"))
            graph = build_network(arch.block, arch.stack_count, shape, args.classes,
                                  arch.compression)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        sys.stdout.write(graph.summary())
        return EXIT_OK
    if cmd == "worker":
        return disteval.work(args.server, args.data_root, args.worker_id)

    config = _load_config(args)
    if cmd == "evolve":
        spec, history = cmd_evolve(config, args.distributed, args.spawn_workers, args.fitness,
                                   args.sphere_center)
        print(f"evolved {spec} fitness {history.best_fitness[-1]:.4f}")
    elif cmd == "stack":
        best, _ = cmd_stack(config, args.spec)
        print(f"selected stack {best.stack_count} ({best.parameters} parameters, "
              f"accuracy {best.held_out_accuracy:.4f})")
    elif cmd == "train-final":
        if args.dry_run:
            cmd_train_final(config, None, args.epochs, dry_run=True)
            return EXIT_OK
        arch = args.arch or Path(config.output_dir) / ARCH_FILE
        curves = cmd_train_final(config, arch, args.epochs)
        print(f"final test error {curves[-1].eval_error:.4f}")
    elif cmd in ("transfer", "run"):
        if cmd == "transfer":
            summary = cmd_transfer(config, args.spec, config.train_dataset, config.test_dataset,
                                   args.epochs)
        else:
            summary = cmd_run(config, args.epochs, distributed=args.distributed,
                              spawn_workers=args.spawn_workers, fitness=args.fitness,
                              sphere_center=args.sphere_center)
        print(json.dumps(asdict(summary), indent=2))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ParseError, SubsetError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except TrainingDivergence as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
