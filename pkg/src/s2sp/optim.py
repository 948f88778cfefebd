"""Adam, global-norm clipping, step-decay schedule and early stopping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Mapping

import numpy as np

from .tensor import DimensionError, NumericError, Tensor


def global_norm(grads: Mapping[str, np.ndarray]) -> float:
    return math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))


def clip_global_norm(grads: Mapping[str, np.ndarray], max_norm: float) -> float:
    """Scale all gradients in place by ``min(1, max_norm / joint_norm)``; return the scale."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if norm <= max_norm:
        return 1.0
    s = max_norm / norm
    for g in grads.values():
        g *= g.dtype.type(s)
    return s


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update of every parameter that has a gradient entry."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1 - b1 ** t, 1 - b2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise DimensionError(f"adam: grad {g.shape} vs param {p.data.shape} for {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + state.eps)).astype(p.data.dtype)


@dataclass(frozen=True)
class LrSchedule:
    """Constant for ``warm_steps``, then ×``decay_factor`` per ``decay_every`` steps.

    The first decay lands exactly at ``step == warm_steps``. The reference
    translation setup is ``LrSchedule(5e-5, 0.8, 50_000, 400_000)``.
    """

    base_lr: float
    decay_factor: float = 1.0
    decay_every: int = 1
    warm_steps: int = 0

    def __post_init__(self):
        if not 0 < self.decay_factor <= 1:
            raise ValueError("decay_factor must lie in (0, 1]")
        if self.decay_every < 1:
            raise ValueError("decay_every must be positive")


def lr_at(schedule: LrSchedule, step: int) -> float:
    if step < 0:
        raise ValueError("step must be nonnegative")
    if step < schedule.warm_steps:
        return schedule.base_lr
    n = (step - schedule.warm_steps) // schedule.decay_every + 1
    return schedule.base_lr * schedule.decay_factor ** n


@dataclass
class EarlyStopper:
    """Tracks the lowest validation perplexity and the checkpoint that produced it."""

    patience: int = 5
    best: float = math.inf
    best_checkpoint: Any = None
    bad_evals: int = 0

    def update(self, valid_ppl: float, checkpoint: Any = None) -> str:
        if not math.isfinite(valid_ppl):
            raise NumericError("validation perplexity is not finite")
        if valid_ppl < self.best:
            self.best = valid_ppl
            self.best_checkpoint = checkpoint
            self.bad_evals = 0
            return "continue"
        self.bad_evals += 1
        return "stop" if self.bad_evals >= self.patience else "continue"


def early_stop_update(stopper: EarlyStopper, valid_ppl: float, checkpoint: Any = None) -> str:
    return stopper.update(valid_ppl, checkpoint)
