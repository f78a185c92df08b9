"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line.

Run ``pytest tests/test_acceptance.py -v`` (or ``python tests/test_acceptance.py``);
the terminal summary ends with an "acceptance criteria" section.
"""

import math
import os
import signal
import subprocess
import sys
import threading
import time
from pathlib import Path

import numpy as np
import pytest
from gradcheck import numerical_grad, rel_error
from layer_cases import CASES

from blockswarm import cli, disteval, swarm
from blockswarm.config import RunConfig
from blockswarm.data import (
    Dataset,
    ParseError,
    parse_cifar_binary,
    serialise_cifar_binary,
    synth_pair,
)
from blockswarm.fitness import FitnessConfig, run_early_stopping
from blockswarm.netspec import (
    BlockSpec,
    MemoryBudget,
    activation_bytes,
    build_network,
    count_parameters,
    max_stack_count,
)
from blockswarm.stacker import stack_and_select
from blockswarm.stats import student_ttest
from blockswarm.swarm import (
    Bounds,
    ParticleState,
    SwarmConfig,
    evolve,
    sphere_surrogate,
    update_position,
    update_velocity,
)
from blockswarm.trainer import AdamState, SgdSchedule, adam_step, allocate_parameters
from blockswarm.trainer import ops, trainable_elements

criterion = pytest.mark.criterion

W, C1, C2 = 0.7298, 1.49618, 1.49618

# Desk-scale pipeline shared by criteria 7, 8 and 11.
E2E_SETTINGS = dict(
    layers_min=2, layers_max=6, growth_min=4, growth_max=12,
    population_size=6, generations=5, seed=0,
    train_dataset="synth-train", test_dataset="synth-test",
    subset_fraction=0.25, max_epochs_cap=15, final_epochs=10, pad_pixels=1,
)
ARTIFACTS = ("history.csv", "evaluations.csv", "block.txt", "candidates.csv",
             "architecture.txt", "curves.csv", "final.ckpt")


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    root = tmp_path_factory.mktemp("e2e")
    synth_pair(root / "data", "synth", class_count=10, per_class=200, test_per_class=50,
               image_size=8, difficulty=1.0, rng_seed=0)
    runs = []
    for name in ("run1", "run2"):
        config = RunConfig().replace(data_root=str(root / "data"), output_dir=str(root / name),
                                     **E2E_SETTINGS)
        start = time.perf_counter()
        summary = cli.cmd_run(config)
        runs.append((config, summary, time.perf_counter() - start))
    return root, runs


# --- 1 ----------------------------------------------------------------------------

def by_hand(x, v, pbest, gbest, r1, r2):
    new_v = W * v + C1 * r1 * (pbest - x) + C2 * r2 * (gbest - x)
    return new_v, x + new_v


@criterion(1, "PSO update equations with r1 = r2 = 0.5")
def test_c01_pso_equation_fidelity():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    cases = [([10.0, 20.0], [1.0, -2.0], [12.0, 18.0], [15.0, 25.0])]
    for _ in range(200):
        # far from the bounds below, so the position update never clips
        cases.append((rng.uniform(5000, 6000, 2), rng.uniform(-3, 3, 2),
                      rng.uniform(5000, 6000, 2), rng.uniform(5000, 6000, 2)))
    for x, v, pb, gb in cases:
        p = ParticleState(np.array(x, float), np.array(v, float), np.array(pb, float))
        got_v = update_velocity(p, gb, SwarmConfig(), [0.5, 0.5], [0.5, 0.5])
        got_x = update_position(p, got_v, Bounds(1, 10**6, 1, 10**6))  # no clipping
        for d in range(2):
            want_v, want_x = by_hand(float(x[d]), float(v[d]), float(pb[d]), float(gb[d]),
                                     0.5, 0.5)
            assert abs(got_v[d] - want_v) <= math.ulp(want_v)
            assert abs(got_x[d] - want_x) <= math.ulp(want_x)
    # the first case worked out by hand
    p = ParticleState(np.array([10.0, 20.0]), np.array([1.0, -2.0]), np.array([12.0, 18.0]))
    v = update_velocity(p, [15.0, 25.0], SwarmConfig(), [0.5, 0.5], [0.5, 0.5])
    assert abs(v[0] - 5.96643) <= 2 * math.ulp(5.96643)
    assert abs(v[1] - 0.78467) <= 2 * math.ulp(0.78467)
    assert time.perf_counter() - start < 1.0


# --- 2 ----------------------------------------------------------------------------

@criterion(2, "PSO finds the exhaustive-scan optimum of a sphere surrogate")
def test_c02_pso_search_correctness():
    start = time.perf_counter()
    bounds = Bounds()
    for seed in range(10):
        rng = np.random.default_rng(1000 + seed)
        center = (rng.uniform(6, 32), rng.uniform(12, 32))
        fitness = sphere_surrogate(center, bounds)
        optimum = max(bounds.grid(), key=fitness)
        best, history = evolve(SwarmConfig(population_size=20, generations=20, rng_seed=seed),
                               bounds, fitness)
        assert best == optimum, (seed, center)
        assert len(history.records) == 400
    assert time.perf_counter() - start < 10.0


# --- 3 ----------------------------------------------------------------------------

@criterion(3, "finite-difference gradient checks, 100 instances per layer kind")
def test_c03_gradient_oracle():
    start = time.perf_counter()
    worst = {}
    for kind, make in CASES.items():
        rng = np.random.default_rng(2024)
        worst[kind] = 0.0
        for _ in range(100):
            loss, analytic, arrays = make(rng)
            for a, arr in zip(analytic(), arrays):
                assert arr.dtype == np.float64
                worst[kind] = max(worst[kind], rel_error(a, numerical_grad(loss, arr)))
    print("worst relative error per layer kind:", worst)
    assert all(v < 1e-4 for v in worst.values()), worst
    assert time.perf_counter() - start < 120.0


# --- 4 ----------------------------------------------------------------------------

@criterion(4, "parameter accounting equals allocated trainable elements")
def test_c04_parameter_accounting():
    start = time.perf_counter()
    rng = np.random.default_rng(4)
    for _ in range(50):
        spec = BlockSpec(int(rng.integers(1, 33)), int(rng.integers(1, 33)))
        size = int(rng.choice([8, 16, 32]))
        stack = int(rng.integers(1, max_stack_count(size) + 1))
        graph = build_network(spec, stack, (3, size, size), int(rng.integers(2, 101)))
        assert count_parameters(graph) == trainable_elements(allocate_parameters(graph))
    assert time.perf_counter() - start < 10.0


# --- 5 ----------------------------------------------------------------------------

def replay(accs, patience=5, cap=50):
    it = iter(accs)
    return run_early_stopping(lambda e: None, lambda: next(it), patience, cap)


@criterion(5, "early-stopping loop follows its while-condition")
def test_c05_early_stopping_semantics():
    start = time.perf_counter()
    trace = replay([0.5, 0.6, 0.6, 0.55, 0.54, 0.53, 0.52, 0.51])
    # hand trace: acc_best = 0.6 set at epoch 1; the loop exits when epoch = 6
    assert trace.best == 0.6 and trace.best_epoch == 1 and trace.epochs == 6
    rng = np.random.default_rng(5)
    for _ in range(500):
        cap = int(rng.integers(1, 60))
        accs = rng.permutation(np.linspace(0.01, 1.0, 80))
        t = replay(accs, 5, cap)
        assert t.epochs <= cap
        assert t.epochs <= t.best_epoch + 5 or t.capped
        assert t.best == max(t.accuracies)
    assert time.perf_counter() - start < 1.0


# --- 6 ----------------------------------------------------------------------------

@criterion(6, "progressive stacking selection and stopping")
def test_c06_stacking_semantics():
    start = time.perf_counter()
    data = Dataset(np.zeros((6, 3, 32, 32), np.float32), np.array([0, 0, 1, 1, 2, 2]), 3)
    block = BlockSpec(2, 3)

    def injected(accs):
        calls = []

        def trainer(graph):
            calls.append(graph.stack_count)
            return accs[len(calls) - 1]
        return trainer, calls

    trainer, calls = injected([0.80, 0.86, 0.89, 0.88])
    best, _ = stack_and_select(block, data, FitnessConfig(), trainer=trainer)
    assert best.stack_count == 3 and calls == [1, 2, 3, 4]

    trainer, calls = injected([0.90, 0.85])
    best, _ = stack_and_select(block, data, FitnessConfig(), trainer=trainer)
    assert best.stack_count == 1 and calls == [1, 2]

    g1 = build_network(block, 1, data.image_shape, 3)
    budget = MemoryBudget(g1.total_parameters, activation_bytes(g1, 64))
    trainer, calls = injected([0.5, 0.9])
    best, cands = stack_and_select(block, data, FitnessConfig(), budget, trainer=trainer)
    assert best.stack_count == 1 and calls == [1]
    assert cands[1].over_budget and cands[1].held_out_accuracy is None
    assert time.perf_counter() - start < 1.0


# --- 7 ----------------------------------------------------------------------------

@criterion(7, "desk-scale evolve -> stack -> train-final run")
def test_c07_end_to_end(e2e):
    root, runs = e2e
    for config, summary, seconds in runs:
        print(f"{config.output_dir}: {seconds:.0f} s, spec {summary.evolved_spec}, "
              f"stack {summary.stack_count}, test error {summary.final_test_error:.4f}")
        assert seconds < 15 * 60
        assert summary.final_test_error <= 0.5
    a, b = Path(runs[0][0].output_dir), Path(runs[1][0].output_dir)
    for name in ARTIFACTS:
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


# --- 8 ----------------------------------------------------------------------------

def read_evaluations(path):
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return lines[0], sorted(lines[1:])


@criterion(8, "distributed run with 3 workers and one killed worker matches sequential")
def test_c08_distributed_equivalence(e2e, tmp_path):
    root, runs = e2e
    config = runs[0][0].replace(output_dir=str(tmp_path))
    start = time.perf_counter()
    server = disteval.EvalServer(heartbeat_interval=2.0).start()
    cmd = [sys.executable, "-m", "blockswarm", "worker", "--server",
           f"{server.address[0]}:{server.address[1]}", "--data-root", config.data_root]
    workers = [subprocess.Popen(cmd) for _ in range(3)]
    killed = {}

    def killer():
        while not killed and not done.is_set():
            for job_id, status in server.inflight().items():
                if time.monotonic() - status.last_heartbeat > 0.5 and status.pid:
                    os.kill(status.pid, signal.SIGKILL)
                    killed.update(job=job_id, pid=status.pid)
                    return
            time.sleep(0.05)

    done = threading.Event()
    watcher = threading.Thread(target=killer, daemon=True)
    watcher.start()
    try:
        ref = disteval.SubsetRef(config.train_dataset, config.seed, config.subset_fraction)
        evaluator = disteval.DistributedEvaluator(server, ref, config.fitness())
        spec, history = evolve(config.swarm(), config.bounds(), batch_evaluator=evaluator)
    finally:
        done.set()
        server.close()
        codes = []
        for w in workers:
            try:
                codes.append(w.wait(timeout=60))
            except subprocess.TimeoutExpired:
                w.kill()
                codes.append(None)
    seconds = time.perf_counter() - start
    print(f"distributed evolve {seconds:.0f} s, killed {killed}, exit codes {codes}")

    assert killed, "no worker was killed mid-job"
    assert sorted(codes, key=str) == sorted([-signal.SIGKILL, 0, 0], key=str)
    assert server.dispatch_count > len(server.results)
    history.write_csv(tmp_path / "history.csv")
    cli.write_evaluations(evaluator.results, tmp_path / "evaluations.csv")
    seq = Path(config.data_root).parent / "run1"
    assert spec == cli.read_spec(seq / "block.txt")
    assert read_evaluations(tmp_path / "evaluations.csv") == read_evaluations(
        seq / "evaluations.csv")
    assert (tmp_path / "history.csv").read_bytes() == (seq / "history.csv").read_bytes()
    assert seconds < 20 * 60


# --- 9 ----------------------------------------------------------------------------

@criterion(9, "CIFAR binary parser round-trip and errors")
def test_c09_parser():
    start = time.perf_counter()
    rng = np.random.default_rng(9)
    for classes in (10, 100):
        for n in (1, 2, 7):
            pixels = rng.integers(0, 256, size=(n, 3, 32, 32), dtype=np.uint8)
            d = Dataset(pixels.astype(np.float32) / np.float32(255),
                        rng.integers(0, classes, size=n), classes)
            raw = serialise_cifar_binary(d)
            back = parse_cifar_binary(raw, classes)
            assert back.equals(d) and serialise_cifar_binary(back) == raw
            with pytest.raises(ParseError) as err:
                parse_cifar_binary(raw[:-1], classes)
            record = len(raw) // n
            assert err.value.offset == (n - 1) * record
    with pytest.raises(ParseError) as err:
        parse_cifar_binary(bytes(3072))
    assert err.value.offset == 0
    bad = bytearray(3073 * 2)
    bad[3073] = 11
    with pytest.raises(ParseError) as err:
        parse_cifar_binary(bytes(bad))
    assert err.value.offset == 3073
    assert time.perf_counter() - start < 1.0


# --- 10 ---------------------------------------------------------------------------

@criterion(10, "learning-rate schedule, Adam first step, uniform cross-entropy")
def test_c10_schedule_and_optimiser_pins():
    s = SgdSchedule(total_epochs=300)
    lrs = [s.lr_at(e) for e in range(300)]
    drops = [e for e in range(1, 300) if lrs[e] < lrs[e - 1]]
    assert drops == [150, 225]
    assert lrs[0] == 0.1 and lrs[299] == pytest.approx(0.001)

    g = np.array([0.3, -1.7, 4e-4])
    new, _ = adam_step(AdamState(), np.zeros(3), g)
    m_hat = (0.1 * g) / (1 - 0.9)
    v_hat = (0.001 * g * g) / (1 - 0.999)
    assert np.max(np.abs(new - (-0.001 * m_hat / (np.sqrt(v_hat) + 1e-8)))) < 1e-9

    loss, _ = ops.softmax_cross_entropy(np.full((4, 10), 2.5), np.array([0, 3, 7, 9]))
    assert abs(loss - math.log(10)) < 1e-12


# --- 11 ---------------------------------------------------------------------------

@criterion(11, "transfer runs stacking and training without any search")
def test_c11_transfer(e2e, monkeypatch):
    root, runs = e2e
    synth_pair(root / "data", "other", class_count=6, per_class=200, test_per_class=50,
               image_size=8, difficulty=1.0, rng_seed=17, variant=3)
    calls = {"swarm": 0}

    def counted(fn):
        def wrapper(*args, **kwargs):
            calls["swarm"] += 1
            return fn(*args, **kwargs)
        return wrapper

    for module, name in ((swarm, "evolve"), (cli, "evolve"), (swarm, "update_velocity"),
                         (cli, "SubsetEvaluator"), (disteval, "evaluate_block")):
        monkeypatch.setattr(module, name, counted(getattr(module, name)))
    config = runs[0][0].replace(output_dir=str(root / "transfer"))
    summary = cli.cmd_transfer(config, Path(runs[0][0].output_dir) / "block.txt",
                               "other-train", "other-test")
    print(f"transfer: stack {summary.stack_count}, test error {summary.final_test_error:.4f}")
    assert calls["swarm"] == 0
    assert summary.phase_seconds["evolve"] == 0
    assert summary.stack_count >= 1 and 0.0 <= summary.final_test_error <= 1.0
    assert (root / "transfer" / "final.ckpt").exists()


# --- 12 ---------------------------------------------------------------------------

@criterion(12, "Student's t-test")
def test_c12_ttest():
    same = student_ttest([0.81, 0.79, 0.8], [0.81, 0.79, 0.8])
    assert same.p == 1.0 and same.t == 0.0
    r = student_ttest([2.1, 2.5, 2.3], [2.2, 2.6, 2.4])
    # reference: the textbook pooled formula, evaluated independently by scipy
    assert abs(r.t - (-0.6123724356957979)) < 1e-6
    assert abs(r.p - 0.5733922538253535) < 1e-6


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v", "-s"] + sys.argv[1:]))
