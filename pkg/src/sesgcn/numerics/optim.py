from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import ConfigError, ContractViolation
from .tensor import DiffTensor


@dataclass
class AdamState:
    """ADAM hyper-parameters, moment buffers and a multi-step decay schedule.

    ``decay_schedule`` holds ``(epoch, multiplier)`` pairs; the effective
    learning rate at a zero-based epoch is the base rate times every multiplier
    whose milestone is ``<= epoch``.
    """

    learning_rate: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    decay_schedule: list[tuple[int, float]] = field(default_factory=list)
    step: int = 0
    epoch: int = 0
    first_moment: dict[int, np.ndarray] = field(default_factory=dict)
    second_moment: dict[int, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 < b < 1.0:
                raise ConfigError(f"{name} must lie in (0, 1), got {b}")

    def effective_lr(self, epoch: int | None = None) -> float:
        epoch = self.epoch if epoch is None else epoch
        lr = self.learning_rate
        for milestone, mult in self.decay_schedule:
            if epoch >= milestone:
                lr *= mult
        return lr


def step_decay_schedule(epochs: Sequence[int], factor: float = 0.1) -> list[tuple[int, float]]:
    return [(int(e), float(factor)) for e in epochs]


def adam_step(state: AdamState, params: Sequence[DiffTensor]) -> None:
    """One ADAM update in place. Entries where ``trainable_mask`` is False stay put."""
    for i, p in enumerate(params):
        if p.grad is None:
            raise ContractViolation(f"adam_step: parameter {p.name or i} has no gradient")
    state.step += 1
    t = state.step
    lr = state.effective_lr()
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for i, p in enumerate(params):
        g = p.grad
        m = state.first_moment.get(i)
        v = state.second_moment.get(i)
        if m is None:
            m = state.first_moment[i] = np.zeros_like(p.data)
            v = state.second_moment[i] = np.zeros_like(p.data)
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = lr * (m / c1) / (np.sqrt(v / c2) + state.eps_adam)
        if p.trainable_mask is not None:
            update = np.where(p.trainable_mask, update, 0.0)
        p.data -= update


def clip_grad_norm(params: Sequence[DiffTensor], max_norm: float) -> float:
    """Rescale gradients so their global L2 norm is at most ``max_norm``; returns the norm before clipping."""
    total = math.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None))
    if total > max_norm:
        k = max_norm / total
        for p in params:
            if p.grad is not None:
                p.grad *= k
    return total
