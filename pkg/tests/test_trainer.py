import io
import math

import numpy as np
import pytest
from gradcheck import numerical_grad, rel_error
from layer_cases import CASES

from blockswarm.netspec import BlockSpec, build_network, count_parameters
from blockswarm.trainer import (
    Adam,
    AdamState,
    NesterovSGD,
    SgdSchedule,
    TrainingDivergence,
    adam_step,
    allocate_parameters,
    backward,
    forward,
    initialize_parameters,
    load_checkpoint,
    predict,
    read_checkpoint,
    save_checkpoint,
    sgd_nesterov_step,
    train_epochs,
    trainable_elements,
    write_checkpoint,
)
from blockswarm.trainer import ops


@pytest.mark.parametrize("kind", sorted(CASES))
def test_layer_gradients_small_sample(kind):
    rng = np.random.default_rng(7)
    for _ in range(10):
        loss, analytic, arrays = CASES[kind](rng)
        for a, arr in zip(analytic(), arrays):
            assert rel_error(a, numerical_grad(loss, arr)) < 1e-4


def test_whole_network_gradients():
    rng = np.random.default_rng(0)
    graph = build_network(BlockSpec(2, 2), 2, (2, 4, 4), 3)
    params = initialize_parameters(graph, 1, np.float64)
    for t in params.values():
        if t.trainable and t.values.ndim == 1:
            t.values[...] += rng.normal(scale=0.1, size=t.shape)
    x = rng.normal(size=(4, 2, 4, 4))
    y = rng.integers(0, 3, size=4)
    _, grads, _ = backward(graph, params, x, y)
    assert set(grads) == {k for k, t in params.items() if t.trainable}
    for name, g in grads.items():
        arr = params[name].values
        num = numerical_grad(lambda: backward(graph, params, x, y)[0], arr)
        if np.linalg.norm(num) < 1e-7:
            # a bias feeding a training-mode batch norm is cancelled exactly
            assert np.linalg.norm(g) < 1e-7, name
        else:
            assert rel_error(g, num) < 1e-4, name


def test_uniform_logits_cross_entropy_is_ln10():
    loss, grad = ops.softmax_cross_entropy(np.zeros((5, 10)), np.arange(5))
    assert abs(loss - math.log(10)) < 1e-12
    assert np.allclose(grad.sum(axis=1), 0)


def test_allocation_matches_counted_parameters():
    rng = np.random.default_rng(5)
    for _ in range(20):
        spec = BlockSpec(int(rng.integers(1, 8)), int(rng.integers(1, 10)))
        stack = int(rng.integers(1, 4))
        g = build_network(spec, stack, (3, 16, 16), int(rng.integers(2, 12)))
        assert trainable_elements(allocate_parameters(g)) == count_parameters(g)


def test_he_initialisation_statistics():
    g = build_network(BlockSpec(2, 64), 1, (3, 8, 8), 10)
    params = initialize_parameters(g, 0)
    w = params["block1.layer2.conv.weight"].values
    fan_in = w.shape[1] * 9
    assert w.std() == pytest.approx(math.sqrt(2 / fan_in), rel=0.05)
    assert np.all(params["block1.layer1.bn.gamma"].values == 1)
    assert np.all(params["stem.bias"].values == 0)


def test_adam_first_step_bias_corrected():
    state = AdamState()
    g = np.array([0.5, -2.0, 1e-3])
    new, state = adam_step(state, np.ones(3), g)
    # m_hat = g and v_hat = g^2 after one step, so the move is lr * g / (|g| + eps)
    expected = 1.0 - 0.001 * g / (np.abs(g) + 1e-8)
    assert np.max(np.abs(new - expected)) < 1e-9
    assert state.t == 1


def test_schedule_drops():
    s = SgdSchedule(total_epochs=300)
    assert s.lr_at(149) == 0.1 and s.lr_at(150) == pytest.approx(0.01)
    assert s.lr_at(224) == pytest.approx(0.01) and s.lr_at(225) == pytest.approx(0.001)
    assert [row[0] for row in s.table()] == [0, 150, 225]
    s4 = SgdSchedule(total_epochs=4)
    assert [s4.lr_at(e) for e in range(4)] == pytest.approx([0.1, 0.1, 0.01, 0.001])


def test_nesterov_step_by_hand():
    s = SgdSchedule(total_epochs=10)
    p, g, buf = np.array([1.0]), np.array([0.5]), np.array([0.2])
    new, nbuf = sgd_nesterov_step(s, 0, p, g, buf)
    gd = 0.5 + 1e-4 * 1.0
    b = 0.9 * 0.2 + gd
    assert nbuf[0] == pytest.approx(b, abs=1e-15)
    assert new[0] == pytest.approx(1.0 - 0.1 * (gd + 0.9 * b), abs=1e-15)
    _, nbuf = sgd_nesterov_step(s, 0, p, g, buf, weight_decay=False)
    assert nbuf[0] == pytest.approx(0.9 * 0.2 + 0.5, abs=1e-15)
    with pytest.raises(ValueError):
        sgd_nesterov_step(s, 10, p, g, buf)


def test_optimisers_skip_decay_on_bias_and_bn():
    g = build_network(BlockSpec(1, 2), 1, (1, 4, 4), 2)
    params = initialize_parameters(g, 0)
    zero = {k: np.zeros_like(t.values) for k, t in params.items() if t.trainable}
    before = {k: t.values.copy() for k, t in params.items()}
    NesterovSGD(SgdSchedule(total_epochs=2)).step(params, zero, 0)
    for k, t in params.items():
        if k.endswith(".weight"):
            assert not np.array_equal(t.values, before[k])
        else:
            assert np.array_equal(t.values, before[k])


def test_checkpoint_roundtrip_and_layout(tmp_path):
    g = build_network(BlockSpec(2, 3), 2, (3, 8, 8), 4)
    params = initialize_parameters(g, 2, np.float32)
    buf = io.BytesIO()
    write_checkpoint(params, buf)
    raw = buf.getvalue()
    assert raw[:4] == b"BSWM"
    assert int.from_bytes(raw[4:8], "little") == 1
    assert int.from_bytes(raw[8:12], "little") == len(params)
    back = read_checkpoint(io.BytesIO(raw), np.float32)
    assert list(back) == list(params)
    for k in params:
        assert np.array_equal(back[k].values, params[k].values)
        assert back[k].trainable == params[k].trainable
    save_checkpoint(params, tmp_path / "m.ckpt")
    assert (tmp_path / "m.ckpt").read_bytes() == raw
    assert list(load_checkpoint(tmp_path / "m.ckpt")) == list(params)
    with pytest.raises(ValueError):
        read_checkpoint(io.BytesIO(raw[:-3]))
    with pytest.raises(ValueError):
        read_checkpoint(io.BytesIO(b"XXXX" + raw[4:]))


def test_backward_does_not_mutate_and_tracks_stats_on_request():
    g = build_network(BlockSpec(2, 2), 1, (3, 4, 4), 3)
    params = initialize_parameters(g, 0)
    x = np.random.default_rng(0).normal(size=(6, 3, 4, 4)) + 2.0
    snap = {k: t.values.copy() for k, t in params.items()}
    backward(g, params, x, np.zeros(6, int))
    assert all(np.array_equal(params[k].values, v) for k, v in snap.items())
    backward(g, params, x, np.zeros(6, int), track_stats=True)
    assert not np.array_equal(params["block1.layer1.bn.running_mean"].values,
                              snap["block1.layer1.bn.running_mean"])
    with pytest.raises(ValueError):
        backward(g, params, x, np.full(6, 3))
    with pytest.raises(ValueError):
        forward(g, params, x, mode="test")


def test_non_finite_loss_raises_divergence():
    g = build_network(BlockSpec(1, 2), 1, (1, 4, 4), 2)
    params = initialize_parameters(g, 0)
    params["head.fc.bias"].values[0] = np.inf
    with pytest.raises(TrainingDivergence):
        backward(g, params, np.ones((2, 1, 4, 4)), np.array([0, 1]))


def test_training_learns_and_is_deterministic(tiny_dataset):
    g = build_network(BlockSpec(2, 6), 1, tiny_dataset.image_shape, 10)
    x, y = tiny_dataset.images, tiny_dataset.labels

    def run():
        params = initialize_parameters(g, 0, np.float32)
        curves = train_epochs(g, params, x, y, x, y, Adam(), 4, 32, rng_seed=0)
        return params, curves

    p1, c1 = run()
    p2, c2 = run()
    assert c1 == c2
    assert all(np.array_equal(p1[k].values, p2[k].values) for k in p1)
    assert c1[-1].train_loss < c1[0].train_loss
    assert c1[-1].eval_error < 0.9
    assert predict(g, p1, x).shape == y.shape
