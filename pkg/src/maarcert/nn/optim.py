"""SGD with momentum and Adam, with a step-decay learning rate schedule."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ConfigError


@dataclass(frozen=True)
class StepSchedule:
    """Multiply the rate by ``factor`` every ``period`` epochs once ``epoch >= start``.

    The first decay applies at ``epoch == start`` (0-based epochs), so with
    start=60, factor=0.5, period=10 epoch 85 runs at 0.5**3 of the base rate.
    ``start=None`` disables decay.
    """

    start: int | None = None
    factor: float = 0.5
    period: int = 10

    def rate(self, base: float, epoch: int) -> float:
        if self.start is None or epoch < self.start:
            return base
        return base * self.factor ** ((epoch - self.start) // self.period + 1)


@dataclass
class SGDMomentum:
    learning_rate: float
    momentum: float = 0.9
    schedule: StepSchedule = field(default_factory=StepSchedule)
    buffers: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def step(self, params: dict, grads: dict, epoch: int):
        lr = self.schedule.rate(self.learning_rate, epoch)
        for name, g in grads.items():
            p = params[name]
            if self.momentum:
                buf = self.buffers.get(name)
                buf = g.copy() if buf is None else self.momentum * buf + g
                self.buffers[name] = buf
                p -= lr * buf
            else:
                p -= lr * g


@dataclass
class Adam:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    schedule: StepSchedule = field(default_factory=StepSchedule)
    buffers: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")

    def step(self, params: dict, grads: dict, epoch: int):
        lr = self.schedule.rate(self.learning_rate, epoch)
        for name, g in grads.items():
            p = params[name]
            m, v = self.buffers.get(name, (np.zeros_like(p), np.zeros_like(p)))
            t = self.steps.get(name, 0) + 1
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.buffers[name] = (m, v)
            self.steps[name] = t
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps_adam)


def make_optimizer(kind: str, learning_rate: float, schedule: StepSchedule | None = None, **kw):
    schedule = schedule or StepSchedule()
    if kind == "adam":
        return Adam(learning_rate, schedule=schedule, **kw)
    if kind == "sgd":
        return SGDMomentum(learning_rate, schedule=schedule, **kw)
    raise ConfigError(f"unknown optimizer {kind!r}")


def optimizer_step(state, net, grads: dict, epoch: int):
    """Apply one update in place to the parameters of ``net`` named in ``grads``."""
    params = dict(net.named_parameters())
    state.step(params, grads, epoch)
    return state
