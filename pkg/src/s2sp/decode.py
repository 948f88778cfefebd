"""Greedy and beam-search decoding (always in eval mode, so deterministic)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tc
from .layers import BOS, EOS, PAD
from .seq2seq import EncoderStates, Seq2SeqModel, decode_step, encode, initial_state
from .tensor import Tensor


@dataclass
class Hypothesis:
    tokens: list[int]
    score: float = 0.0
    finished: bool = False
    state: list = field(default_factory=list, repr=False)

    @property
    def length(self) -> int:
        return len(self.tokens) - 1


@dataclass
class BeamResult:
    best: Hypothesis
    completed: list[Hypothesis]
    live: list[Hypothesis]
    truncated: bool


def default_max_len(src: Sequence[int]) -> int:
    return 2 * len(src) + 10


def _as_models(model) -> list[Seq2SeqModel]:
    return list(model) if isinstance(model, (list, tuple)) else [model]


def _encode_one(models, src: Sequence[int]) -> list[EncoderStates]:
    ids = np.asarray(src, dtype=np.int64)[None, :]
    return [encode(m, ids) for m in models]


def _expand(enc: EncoderStates, n: int) -> EncoderStates:
    rows = np.zeros(n, dtype=np.int64)
    return EncoderStates(Tensor._wrap(enc.first.data[rows], False), Tensor._wrap(enc.last.data[rows], False),
                         enc.mask[rows])


def _step_logprobs(models, encs, y_prev: np.ndarray, states):
    """Float64 log-probabilities ``[n, V]``; several models average probabilities."""
    n = len(y_prev)
    outs, new_states = [], []
    for m, enc, st in zip(models, encs, states):
        logits, st2 = decode_step(m, y_prev, st, _expand(enc, n))
        lp = logits.data.astype(np.float64)
        lp = lp - lp.max(axis=1, keepdims=True)
        lp = lp - np.log(np.exp(lp).sum(axis=1, keepdims=True))
        outs.append(lp)
        new_states.append(st2)
    if len(outs) == 1:
        return outs[0], new_states
    mean = np.mean([np.exp(o) for o in outs], axis=0)
    return np.log(mean), new_states


def _gather(states, rows: np.ndarray):
    return [[(Tensor._wrap(h.data[rows], False), Tensor._wrap(c.data[rows], False)) for h, c in st]
            for st in states]


def _allowed(V: int) -> np.ndarray:
    ok = np.ones(V, dtype=bool)
    ok[[PAD, BOS]] = False
    return ok


def greedy(model, src: Sequence[int], max_len: int | None = None) -> Hypothesis:
    """Argmax decoding until EOS or ``max_len`` tokens."""
    models = _as_models(model)
    max_len = default_max_len(src) if max_len is None else max_len
    with tc.no_grad():
        encs = _encode_one(models, src)
        states = [initial_state(m, 1) for m in models]
        hyp = Hypothesis([BOS])
        for _ in range(max_len):
            lp, states = _step_logprobs(models, encs, np.array([hyp.tokens[-1]]), states)
            row = np.where(_allowed(lp.shape[1]), lp[0], -np.inf)
            v = int(np.argmax(row))
            hyp.tokens.append(v)
            hyp.score += row[v]
            if v == EOS:
                hyp.finished = True
                break
        hyp.state = states
    return hyp


def _rank_key(h: Hypothesis, length_norm: bool):
    s = h.score / max(h.length, 1) if length_norm else h.score
    return (-s, h.tokens, h.length)


def beam_search(model, src: Sequence[int], beam: int = 10, max_len: int | None = None,
                length_norm: bool = False) -> BeamResult:
    """Beam search; each finished hypothesis closes one live slot.

    The winner is the best of completed and still-live hypotheses (score,
    or score per token with ``length_norm``). Equal scores prefer the lower
    token id, then the shorter hypothesis.
    """
    if beam < 1:
        raise ValueError("beam must be at least 1")
    models = _as_models(model)
    max_len = default_max_len(src) if max_len is None else max_len
    if max_len < 1:
        raise ValueError("max_len must be at least 1")
    completed: list[Hypothesis] = []
    with tc.no_grad():
        encs = _encode_one(models, src)
        live = [Hypothesis([BOS], 0.0, False, [initial_state(m, 1) for m in models])]
        states = live[0].state
        for _ in range(max_len):
            slots = beam - len(completed)
            if slots <= 0 or not live:
                break
            y_prev = np.array([h.tokens[-1] for h in live])
            lp, states = _step_logprobs(models, encs, y_prev, states)
            V = lp.shape[1]
            ok = _allowed(V)
            cand = np.array([h.score for h in live])[:, None] + lp
            cand[:, ~ok] = -np.inf
            flat = cand.reshape(-1)
            # Sort by score desc, then token id, then parent order.
            tok = np.tile(np.arange(V), len(live))
            parent = np.repeat(np.arange(len(live)), V)
            order = np.lexsort((parent, tok, -flat))[:slots]
            order = [k for k in order if np.isfinite(flat[k])]
            keep_rows, next_live = [], []
            for k in order:
                p, v = int(parent[k]), int(tok[k])
                h = Hypothesis(live[p].tokens + [v], float(flat[k]))
                if v == EOS:
                    h.finished = True
                    completed.append(h)
                else:
                    keep_rows.append(p)
                    next_live.append(h)
            if next_live:
                states = _gather(states, np.array(keep_rows))
                for i, h in enumerate(next_live):
                    h.state = [[(hh.data[i:i + 1], cc.data[i:i + 1]) for hh, cc in st] for st in states]
            live = next_live
    pool = completed + live
    best = min(pool, key=lambda h: _rank_key(h, length_norm))
    return BeamResult(best, completed, live, truncated=not best.finished)
