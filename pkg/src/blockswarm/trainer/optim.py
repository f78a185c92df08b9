"""Adam and Nesterov-momentum SGD with a step learning-rate schedule."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import ParamStore, decays


@dataclass
class AdamState:
    lr: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    t: int = 0
    m: np.ndarray | None = None
    v: np.ndarray | None = None


def adam_step(state: AdamState, param, grad):
    """One bias-corrected Adam update; returns ``(new_param, state)``."""
    param = np.asarray(param)
    grad = np.asarray(grad)
    if grad.shape != param.shape:
        raise ValueError("param and grad shapes differ")
    if state.m is None:
        state.m = np.zeros_like(param)
        state.v = np.zeros_like(param)
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1 ** state.t)
    v_hat = state.v / (1 - state.beta2 ** state.t)
    return param - state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon), state


@dataclass(frozen=True)
class SgdSchedule:
    initial_lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    total_epochs: int = 300
    drop_points: tuple[float, ...] = (0.5, 0.75)
    drop_factor: float = 10.0

    def __post_init__(self):
        points = list(self.drop_points)
        if any(not 0 < p < 1 for p in points) or points != sorted(set(points)):
            raise ValueError("drop points must be strictly increasing in (0, 1)")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")

    def lr_at(self, epoch: int) -> float:
        passed = sum(1 for p in self.drop_points if epoch >= p * self.total_epochs)
        return self.initial_lr / self.drop_factor ** passed

    def table(self) -> list[tuple[int, int, float]]:
        """``(first_epoch, end_epoch, lr)`` for every constant-rate stretch."""
        rows, start = [], 0
        for e in range(1, self.total_epochs + 1):
            if e == self.total_epochs or self.lr_at(e) != self.lr_at(start):
                rows.append((start, e, self.lr_at(start)))
                start = e
        return rows


def sgd_nesterov_step(schedule: SgdSchedule, epoch: int, param, grad, momentum_buffer,
                      weight_decay: bool = True):
    """Nesterov SGD without dampening; returns ``(new_param, new_buffer)``."""
    if not 0 <= epoch < schedule.total_epochs:
        raise ValueError(f"epoch {epoch} outside schedule of {schedule.total_epochs}")
    lr = schedule.lr_at(epoch)
    g = grad + schedule.weight_decay * param if weight_decay else grad
    buf = schedule.momentum * momentum_buffer + g
    return param - lr * (g + schedule.momentum * buf), buf


class Adam:
    def __init__(self, lr=0.001, beta1=0.9, beta2=0.999, epsilon=1e-8):
        self.hyper = dict(lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)
        self.states: dict[str, AdamState] = {}

    def step(self, params: ParamStore, grads: dict, epoch: int = 0) -> None:
        for name, g in grads.items():
            state = self.states.setdefault(name, AdamState(**self.hyper))
            t = params[name]
            new, _ = adam_step(state, t.values, g)
            t.values[...] = new


@dataclass
class NesterovSGD:
    schedule: SgdSchedule
    buffers: dict = field(default_factory=dict)

    def step(self, params: ParamStore, grads: dict, epoch: int = 0) -> None:
        for name, g in grads.items():
            t = params[name]
            buf = self.buffers.get(name)
            if buf is None:
                buf = np.zeros_like(t.values)
            new, self.buffers[name] = sgd_nesterov_step(self.schedule, epoch, t.values, g, buf,
                                                        weight_decay=decays(name))
            t.values[...] = new
