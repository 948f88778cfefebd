"""Shared optimisation loop: Adam + clipping + decay + perplexity early stopping."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from .layers import Batch
from .optim import AdamState, EarlyStopper, LrSchedule, adam_step, clip_global_norm, lr_at
from .params import ParamStore, collect_grads, restore, snapshot, zero_grads
from .tensor import Rng, Tape, Tensor


class TrainingError(RuntimeError):
    def __init__(self, message: str, step: int):
        super().__init__(f"{message} at step {step}")
        self.step = step


@dataclass
class TrainConfig:
    batch_size: int = 32
    max_steps: int = 2000
    lr: float = 2e-3
    decay_factor: float = 0.8
    decay_every: int = 500
    warm_steps: int = 1000
    clip_norm: float = 5.0
    eval_every: int = 100
    patience: int = 5

    @property
    def schedule(self) -> LrSchedule:
        return LrSchedule(self.lr, self.decay_factor, self.decay_every, self.warm_steps)


def minibatches(items: Sequence, batch_size: int, rng: Rng) -> Iterator[list]:
    """Endless shuffled minibatches of items, reshuffled at each epoch boundary."""
    n = len(items)
    while True:
        order = rng.permutation(n)
        for start in range(0, n - batch_size + 1 if n >= batch_size else 1, batch_size):
            yield [items[i] for i in order[start:start + batch_size]]


def batches(corpus: Sequence[Sequence[int]], batch_size: int, rng: Rng) -> Iterator[Batch]:
    for chunk in minibatches(corpus, batch_size, rng):
        yield Batch.from_sequences(chunk)


def eval_batches(corpus: Sequence[Sequence[int]], batch_size: int) -> list[Batch]:
    return [Batch.from_sequences(corpus[i:i + batch_size]) for i in range(0, len(corpus), batch_size)]


def fit(params: ParamStore, step_loss: Callable[[int], Tensor], evaluate: Callable[[], float],
        cfg: TrainConfig, on_eval: Callable[[dict], None] | None = None) -> list[dict]:
    """Minimise ``step_loss`` and leave ``params`` at the best-validation snapshot.

    Returns the log: one row per evaluation with step, train_loss, valid_ppl
    and lr, where train_loss averages the steps since the previous row.
    """
    state = AdamState()
    stopper = EarlyStopper(cfg.patience)
    log: list[dict] = []
    running, count = 0.0, 0
    schedule = cfg.schedule

    def do_eval(step: int, lr: float) -> str:
        nonlocal running, count
        ppl = evaluate()
        row = {"step": step, "train_loss": running / max(count, 1), "valid_ppl": ppl, "lr": lr}
        log.append(row)
        if on_eval is not None:
            on_eval(row)
        running, count = 0.0, 0
        return stopper.update(ppl, snapshot(params))

    lr = lr_at(schedule, 0)
    do_eval(0, lr)
    for step in range(1, cfg.max_steps + 1):
        lr = lr_at(schedule, step - 1)
        zero_grads(params)
        with Tape() as tape:
            loss = step_loss(step)
        value = float(loss.data)
        if not math.isfinite(value):
            raise TrainingError("non-finite training loss", step)
        tape.backward(loss)
        grads = collect_grads(params)
        clip_global_norm(grads, cfg.clip_norm)
        adam_step(params, grads, state, lr)
        running += value
        count += 1
        if step % cfg.eval_every == 0 or step == cfg.max_steps:
            if do_eval(step, lr) == "stop":
                break
    restore(params, stopper.best_checkpoint)
    zero_grads(params)
    return log


def token_nll(logits: np.ndarray, targets: np.ndarray, mask: np.ndarray) -> tuple[float, int]:
    """Summed negative log-likelihood (float64) and token count over masked positions."""
    lg = logits.reshape(-1, logits.shape[-1]).astype(np.float64)
    t = targets.reshape(-1)
    m = mask.reshape(-1)
    mx = lg.max(axis=1, keepdims=True)
    lse = np.log(np.exp(lg - mx).sum(axis=1)) + mx[:, 0]
    nll = lse - lg[np.arange(len(t)), np.where(m, t, 0)]
    return float(nll[m].sum()), int(m.sum())
