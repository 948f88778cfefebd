"""Next-token language models used as pretraining donors.

A donor is exactly embedding -> one projection LSTM -> softmax, so every
donor tensor has a recipient in the translation model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tc
from .bpe import Vocab
from .layers import (EVAL, Batch, DropoutSpec, EmbeddingLayer, LstmLayer, SoftmaxLayer, embed,
                     project_logits, unroll)
from .params import ParamStore
from .tensor import ContractError, DimensionError, Rng, Tensor
from .training import TrainConfig, batches, eval_batches, fit, token_nll


@dataclass
class LmConfig:
    """Donor LM sizes. The full-scale reference is a 4096-unit LSTM projected to 1024."""

    d_emb: int = 64
    hidden: int = 256
    proj: int = 64
    dropout: float = 0.2
    # After training, rescale to bring the first-layer output RMS near this value (0 disables).
    output_rms: float = 0.5
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        batch_size=64, max_steps=3000, lr=2e-3, warm_steps=2000, decay_every=250, eval_every=250))

    def __post_init__(self):
        if min(self.d_emb, self.hidden, self.proj) <= 0:
            raise ValueError("LM dimensions must be positive")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if self.output_rms < 0:
            raise ValueError("output_rms must be non-negative")


@dataclass
class LanguageModel:
    embedding: EmbeddingLayer
    lstm1: LstmLayer
    softmax: SoftmaxLayer
    vocab: Vocab | None = None

    def __post_init__(self):
        if self.embedding.vocab_size != self.softmax.vocab_size:
            raise DimensionError("embedding and softmax vocabularies differ")
        if self.lstm1.output_dim != self.softmax.W.shape[0]:
            raise DimensionError("LSTM output does not match softmax input")

    @classmethod
    def init(cls, vocab_size: int, cfg: LmConfig, rng: Rng, vocab: Vocab | None = None) -> "LanguageModel":
        return cls(EmbeddingLayer.init(vocab_size, cfg.d_emb, rng),
                   LstmLayer.init(cfg.d_emb, cfg.hidden, cfg.proj, rng),
                   SoftmaxLayer.init(cfg.proj, vocab_size, rng), vocab)

    @property
    def vocab_size(self) -> int:
        return self.embedding.vocab_size

    def params(self) -> ParamStore:
        return {**self.embedding.params("embedding"), **self.lstm1.params("lstm1"),
                **self.softmax.params("softmax")}


def path_logits(embedding: EmbeddingLayer, lstm: LstmLayer, softmax: SoftmaxLayer, ids: np.ndarray,
                dropout: DropoutSpec = EVAL, rng: Rng | None = None) -> Tensor:
    """Logits ``[B, T, V]``; position t has consumed ``ids[:, :t+1]``."""
    x = embed(embedding, ids)
    (h,) = unroll([lstm], x, ids != 0, dropout, rng)
    return project_logits(softmax, dropout.apply(h, rng))


def path_loss(embedding: EmbeddingLayer, lstm: LstmLayer, softmax: SoftmaxLayer, batch: Batch,
              dropout: DropoutSpec = EVAL, rng: Rng | None = None) -> Tensor:
    """Mean next-token cross entropy of an embedding/LSTM/softmax stack on ``batch``."""
    ids = batch.ids
    if ids.shape[1] < 2:
        raise ContractError("LM loss needs sequences of at least two tokens")
    logits = path_logits(embedding, lstm, softmax, ids[:, :-1], dropout, rng)
    B, T, V = logits.shape
    targets = ids[:, 1:]
    return tc.cross_entropy(tc.reshape(logits, (B * T, V)), targets, targets != 0)


def lm_forward(model: LanguageModel, batch: Batch, dropout: DropoutSpec = EVAL,
               rng: Rng | None = None) -> Tensor:
    ids = batch.ids if isinstance(batch, Batch) else np.asarray(batch)
    if ids.size and ids.max() >= model.vocab_size:
        raise DimensionError(f"batch ids exceed vocabulary size {model.vocab_size}")
    return path_logits(model.embedding, model.lstm1, model.softmax, ids, dropout, rng)


def lm_loss(model: LanguageModel, batch: Batch, dropout: DropoutSpec = EVAL,
            rng: Rng | None = None) -> Tensor:
    return path_loss(model.embedding, model.lstm1, model.softmax, batch, dropout, rng)


def corpus_nll(embedding: EmbeddingLayer, lstm: LstmLayer, softmax: SoftmaxLayer,
               batches_: Sequence[Batch]) -> tuple[float, int]:
    nll, n = 0.0, 0
    with tc.no_grad():
        for b in batches_:
            logits = path_logits(embedding, lstm, softmax, b.ids[:, :-1])
            targets = b.ids[:, 1:]
            s, k = token_nll(logits.data, targets, targets != 0)
            nll += s
            n += k
    return nll, n


def output_rms(model: LanguageModel, batches_: Sequence[Batch]) -> float:
    """Root mean square of the first-layer outputs over real tokens."""
    total, n = 0.0, 0
    with tc.no_grad():
        for b in batches_:
            (h,) = unroll([model.lstm1], embed(model.embedding, b.ids), b.mask)
            sel = h.data[b.mask].astype(np.float64)
            total += float((sel ** 2).sum())
            n += sel.size
    return math.sqrt(total / max(n, 1))


def rescale_output(model: LanguageModel, k: int) -> None:
    """Multiply the first-layer output by ``2**k`` without changing the LM.

    The projected state feeds both the recurrence and the softmax, so W_h
    and the softmax weights absorb the inverse factor. Powers of two scale
    exactly in floating point, so the logits are bit-identical afterwards.
    """
    if model.lstm1.W_proj is None:
        raise ContractError("output rescaling needs a projection layer")
    a = math.ldexp(1.0, k)
    model.lstm1.W_proj.data[...] *= a
    model.lstm1.W_h.data[...] /= a
    model.softmax.W.data[...] /= a


def normalize_output(model: LanguageModel, batches_: Sequence[Batch], target_rms: float) -> int:
    """Rescale by the power of two that brings the output RMS closest to ``target_rms``."""
    rms = output_rms(model, batches_)
    if rms == 0 or target_rms <= 0:
        return 0
    k = int(round(math.log2(target_rms / rms)))
    rescale_output(model, k)
    return k


def perplexity(model: LanguageModel, batches_: Sequence[Batch]) -> float:
    """Token-weighted ``exp(total NLL / predicted tokens)``."""
    if not batches_:
        raise ContractError("perplexity needs at least one batch")
    nll, n = corpus_nll(model.embedding, model.lstm1, model.softmax, batches_)
    return math.exp(nll / n)


def train_lm(cfg: LmConfig, corpus: Sequence[Sequence[int]], rng: Rng,
             valid: Sequence[Sequence[int]] | None = None, vocab: Vocab | None = None,
             vocab_size: int | None = None) -> tuple[LanguageModel, list[dict]]:
    """Train a donor LM with Adam; returns the best-validation-perplexity model and its log."""
    V = vocab_size if vocab_size is not None else len(vocab)
    model = LanguageModel.init(V, cfg, rng.spawn(), vocab)
    params = model.params()
    drop = DropoutSpec(cfg.dropout)
    stream = batches(corpus, cfg.train.batch_size, rng.spawn())
    drop_rng = rng.spawn()
    valid_b = eval_batches(valid if valid else corpus, 128)

    def step_loss(step):
        return lm_loss(model, next(stream), drop, drop_rng)

    log = fit(params, step_loss, lambda: perplexity(model, valid_b), cfg.train)
    if cfg.output_rms > 0 and model.lstm1.W_proj is not None:
        normalize_output(model, valid_b, cfg.output_rms)
    return model, log
