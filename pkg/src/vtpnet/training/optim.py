"""Adam / SGD and the epoch-level learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..nn.modules import Parameter


@dataclass
class Schedule:
    """Learning rate as a function of completed epochs.

    ``step``: ``lr * gamma ** (epoch // every)``; ``cosine``: annealing from
    ``lr`` to ``lr_min`` over ``t_max`` epochs; ``constant``.
    """

    kind: str = "constant"
    gamma: float = 0.5
    every: int = 10
    t_max: int = 150
    lr_min: float = 0.0

    def __post_init__(self):
        if self.kind not in ("constant", "step", "cosine"):
            raise ValueError(f"unknown schedule {self.kind!r}")

    def lr_at(self, base_lr: float, epoch: int) -> float:
        if self.kind == "step":
            return base_lr * self.gamma ** (epoch // self.every)
        if self.kind == "cosine":
            t = min(epoch, self.t_max)
            return self.lr_min + (base_lr - self.lr_min) * (1 + math.cos(math.pi * t / self.t_max)) / 2
        return base_lr


class Optimizer:
    kind = ""

    def __init__(self, params: list[Parameter], lr: float):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        self.params = list(params)
        self.base_lr = lr
        self.lr = lr
        self.step_count = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()

    def set_epoch(self, schedule: Schedule, epoch: int) -> None:
        self.lr = schedule.lr_at(self.base_lr, epoch)

    def state_arrays(self) -> dict[str, np.ndarray]:
        raise NotImplementedError

    def load_state_arrays(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_arrays()
        for name, arr in own.items():
            arr[...] = state[name]


class Adam(Optimizer):
    """Bias-corrected Adam with betas (0.9, 0.999) and eps 1e-8."""

    kind = "adam"

    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            update = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data -= update.astype(p.data.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"adam.m.{i}"] = m
            out[f"adam.v.{i}"] = v
        return out


class SGD(Optimizer):
    kind = "sgd"

    def __init__(self, params, lr: float = 0.01, momentum: float = 0.9, weight_decay: float = 0.0):
        super().__init__(params, lr)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buf = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.step_count += 1
        for p, b in zip(self.params, self.buf):
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            b *= self.momentum
            b += g
            p.data -= (self.lr * b).astype(p.data.dtype, copy=False)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {f"sgd.buf.{i}": b for i, b in enumerate(self.buf)}


def make_optimizer(kind: str, params, lr: float, **kw) -> Optimizer:
    if kind == "adam":
        return Adam(params, lr, **kw)
    if kind == "sgd":
        return SGD(params, lr, **kw)
    raise ValueError(f"unknown optimizer {kind!r}")

