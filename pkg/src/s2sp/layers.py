"""Embedding, projection-LSTM, softmax and dropout building blocks.

Gate blocks inside every LSTM weight matrix are ordered [i, f, g, o].
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .tensor import DimensionError, Rng, Tensor

INIT_SCALE = 0.05
FORGET_BIAS = 1.0
PAD, BOS, EOS, UNK = 0, 1, 2, 3
NUM_RESERVED = 4


class OutOfVocabularyError(IndexError):
    pass


@dataclass
class Batch:
    """Padded ``[B, T]`` id matrix; ``mask`` is True on real tokens."""

    ids: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.ids != PAD

    @property
    def shape(self):
        return self.ids.shape

    @classmethod
    def from_sequences(cls, seqs) -> "Batch":
        T = max(len(s) for s in seqs)
        ids = np.full((len(seqs), T), PAD, dtype=np.int64)
        for row, s in enumerate(seqs):
            ids[row, :len(s)] = s
        return cls(ids)


def _param(arr, name) -> Tensor:
    return Tensor(arr, requires_grad=True, name=name)


@dataclass
class EmbeddingLayer:
    table: Tensor

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    @property
    def dim(self) -> int:
        return self.table.shape[1]

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.table": self.table}

    @classmethod
    def init(cls, vocab_size: int, dim: int, rng: Rng) -> "EmbeddingLayer":
        if vocab_size < NUM_RESERVED:
            raise ValueError(f"vocabulary of {vocab_size} cannot hold the reserved ids")
        return cls(_param(rng.uniform(-INIT_SCALE, INIT_SCALE, (vocab_size, dim)), "table"))


@dataclass
class LstmLayer:
    W_x: Tensor
    W_h: Tensor
    b: Tensor
    W_proj: Tensor | None = None

    @property
    def input_dim(self) -> int:
        return self.W_x.shape[0]

    @property
    def hidden(self) -> int:
        return self.W_x.shape[1] // 4

    @property
    def output_dim(self) -> int:
        return self.W_proj.shape[1] if self.W_proj is not None else self.hidden

    def params(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.W_x": self.W_x, f"{prefix}.W_h": self.W_h, f"{prefix}.b": self.b}
        if self.W_proj is not None:
            out[f"{prefix}.W_proj"] = self.W_proj
        return out

    @classmethod
    def init(cls, input_dim: int, hidden: int, proj: int | None, rng: Rng) -> "LstmLayer":
        out_dim = proj if proj is not None else hidden
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = FORGET_BIAS
        return cls(
            _param(rng.uniform(-INIT_SCALE, INIT_SCALE, (input_dim, 4 * hidden)), "W_x"),
            _param(rng.uniform(-INIT_SCALE, INIT_SCALE, (out_dim, 4 * hidden)), "W_h"),
            _param(b, "b"),
            _param(rng.uniform(-INIT_SCALE, INIT_SCALE, (hidden, proj)), "W_proj") if proj is not None else None,
        )


@dataclass
class SoftmaxLayer:
    W: Tensor
    b: Tensor

    @property
    def vocab_size(self) -> int:
        return self.W.shape[1]

    def params(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.W": self.W, f"{prefix}.b": self.b}

    @classmethod
    def init(cls, dim: int, vocab_size: int, rng: Rng) -> "SoftmaxLayer":
        return cls(_param(rng.uniform(-INIT_SCALE, INIT_SCALE, (dim, vocab_size)), "W"),
                   _param(np.zeros(vocab_size), "b"))


@dataclass(frozen=True)
class DropoutSpec:
    """Dropout on non-recurrent connections; ``train=False`` disables it."""

    rate: float = 0.0
    train: bool = True

    def __post_init__(self):
        if not 0 <= self.rate < 1:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")

    def apply(self, x: Tensor, rng: Rng | None) -> Tensor:
        return tc.dropout(x, self.rate, rng, self.train)


EVAL = DropoutSpec(0.0, train=False)


def embed(layer: EmbeddingLayer, ids) -> Tensor:
    ids = np.asarray(ids.ids if isinstance(ids, Batch) else ids)
    if ids.size and (ids.max() >= layer.vocab_size or ids.min() < 0):
        raise OutOfVocabularyError(
            f"token id {int(ids.max())} outside vocabulary of size {layer.vocab_size}")
    return tc.take_rows(layer.table, ids)


def lstm_step(layer: LstmLayer, x_t: Tensor, h_prev: Tensor, c_prev: Tensor,
              dropout: DropoutSpec = EVAL, rng: Rng | None = None) -> tuple[Tensor, Tensor]:
    """Single cell update built from primitive ops. Dropout touches ``x_t`` only."""
    H = layer.hidden
    if x_t.shape[-1] != layer.input_dim or h_prev.shape[-1] != layer.output_dim or c_prev.shape[-1] != H:
        raise DimensionError(
            f"lstm_step: x {x_t.shape}, h {h_prev.shape}, c {c_prev.shape} vs layer "
            f"({layer.input_dim} -> {H} -> {layer.output_dim})")
    x_t = dropout.apply(x_t, rng)
    z = tc.add(tc.add(tc.matmul(x_t, layer.W_x), tc.matmul(h_prev, layer.W_h)), layer.b)
    i = tc.sigmoid(tc.slice_last(z, 0, H))
    f = tc.sigmoid(tc.slice_last(z, H, 2 * H))
    g = tc.tanh(tc.slice_last(z, 2 * H, 3 * H))
    o = tc.sigmoid(tc.slice_last(z, 3 * H, 4 * H))
    c = tc.add(tc.mul(f, c_prev), tc.mul(i, g))
    h = tc.mul(o, tc.tanh(c))
    if layer.W_proj is not None:
        h = tc.matmul(h, layer.W_proj)
    return h, c


def unroll(layers: list[LstmLayer], inputs: Tensor, mask, dropout: DropoutSpec = EVAL,
           rng: Rng | None = None, final_states: list | None = None) -> list[Tensor]:
    """Run a stack of LSTM layers over ``inputs[B, T, d]`` from zero state.

    Returns each layer's ``[B, T, p]`` outputs. Masked steps carry the
    previous state forward. If ``final_states`` is a list, each layer's
    final ``(h, c)`` arrays are appended to it.
    """
    if inputs.shape[1] < 1:
        raise DimensionError("unroll needs at least one timestep")
    outs = []
    x = inputs
    for layer in layers:
        x = dropout.apply(x, rng)
        x, h, c = tc.lstm_sequence(x, layer.W_x, layer.W_h, layer.b, layer.W_proj, mask)
        outs.append(x)
        if final_states is not None:
            final_states.append((h, c))
    return outs


def project_logits(layer: SoftmaxLayer, h: Tensor) -> Tensor:
    if h.shape[-1] != layer.W.shape[0]:
        raise DimensionError(f"project_logits: input {h.shape} vs W {layer.W.shape}")
    return tc.add(tc.matmul(h, layer.W), layer.b)
