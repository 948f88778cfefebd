"""LSTM encoder-decoder with first+last layer attention and a first-layer residual.

Per decoder step t, with q_t the top decoder layer output:

    alpha_i = softmax_i(q_t . hN_i)        (source padding excluded)
    c_t     = [sum_i alpha_i h1_i ; sum_i alpha_i hN_i]
    s_t     = d1_t + tanh([c_t ; q_t] @ W_a)
    logits  = s_t @ W_out + b_out

where h1/hN are the first/last encoder layers and d1_t the first decoder
layer. With W_a = 0 the decoder's softmax input is exactly its first layer
output, i.e. the decoder collapses to a donor-style language model.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tc
from .layers import (EVAL, PAD, Batch, DropoutSpec, EmbeddingLayer, LstmLayer, SoftmaxLayer, embed,
                     lstm_step, project_logits, unroll)
from .params import ParamStore
from .tensor import ContractError, DimensionError, Rng, Tensor

ATTN_INIT_SCALE = 0.1


@dataclass
class Seq2SeqConfig:
    """Layer sizes. The first layer on each side matches the donor LM shape."""

    d_emb: int = 64
    hidden: int = 256
    proj: int = 64
    enc_layers: int = 2
    dec_layers: int = 2
    upper_hidden: int = 256

    def __post_init__(self):
        if self.enc_layers < 1 or self.dec_layers < 1:
            raise ValueError("need at least one encoder and one decoder layer")


@dataclass
class Seq2SeqModel:
    enc_embedding: EmbeddingLayer
    enc_layers: list[LstmLayer]
    dec_embedding: EmbeddingLayer
    dec_layers: list[LstmLayer]
    W_a: Tensor
    dec_softmax: SoftmaxLayer

    def __post_init__(self):
        p_e = self.enc_layers[-1].output_dim
        p_d = self.dec_layers[-1].output_dim
        if self.enc_layers[0].output_dim != p_e:
            raise DimensionError("first and last encoder layers must have equal output width")
        if p_d != p_e:
            raise DimensionError(f"attention needs decoder width {p_d} == encoder width {p_e}")
        if self.dec_layers[0].output_dim != p_d:
            raise DimensionError("residual needs first and top decoder widths to match")
        if self.W_a.shape != (2 * p_e + p_d, p_d):
            raise DimensionError(f"W_a has shape {self.W_a.shape}, expected {(2 * p_e + p_d, p_d)}")
        if self.dec_softmax.W.shape[0] != p_d:
            raise DimensionError("softmax input width must equal decoder width")

    @classmethod
    def init(cls, src_vocab: int, tgt_vocab: int, cfg: Seq2SeqConfig, rng: Rng) -> "Seq2SeqModel":
        def stack(n):
            layers = [LstmLayer.init(cfg.d_emb, cfg.hidden, cfg.proj, rng)]
            layers += [LstmLayer.init(cfg.proj, cfg.upper_hidden, cfg.proj, rng) for _ in range(n - 1)]
            return layers

        enc_emb = EmbeddingLayer.init(src_vocab, cfg.d_emb, rng)
        enc = stack(cfg.enc_layers)
        dec_emb = EmbeddingLayer.init(tgt_vocab, cfg.d_emb, rng)
        dec = stack(cfg.dec_layers)
        W_a = Tensor(rng.uniform(-0.05, 0.05, (3 * cfg.proj, cfg.proj)) * ATTN_INIT_SCALE,
                     requires_grad=True, name="W_a")
        return cls(enc_emb, enc, dec_emb, dec, W_a, SoftmaxLayer.init(cfg.proj, tgt_vocab, rng))

    def params(self) -> ParamStore:
        out = dict(self.enc_embedding.params("enc.embedding"))
        for i, layer in enumerate(self.enc_layers, 1):
            out.update(layer.params(f"enc.lstm{i}"))
        out.update(self.dec_embedding.params("dec.embedding"))
        for i, layer in enumerate(self.dec_layers, 1):
            out.update(layer.params(f"dec.lstm{i}"))
        out["attn.W_a"] = self.W_a
        out.update(self.dec_softmax.params("dec.softmax"))
        return out


@dataclass
class EncoderStates:
    first: Tensor   # [B, T, p]
    last: Tensor    # [B, T, p]
    mask: np.ndarray  # [B, T], True on real source tokens


def _ids(batch) -> np.ndarray:
    return batch.ids if isinstance(batch, Batch) else np.asarray(batch)


def encode(model: Seq2SeqModel, src, dropout: DropoutSpec = EVAL, rng: Rng | None = None) -> EncoderStates:
    ids = _ids(src)
    mask = ids != PAD
    outs = unroll(model.enc_layers, embed(model.enc_embedding, ids), mask, dropout, rng)
    return EncoderStates(outs[0], outs[-1], mask)


def attend(q: Tensor, enc: EncoderStates) -> tuple[Tensor, Tensor]:
    """Attention for queries ``[B, p]`` or ``[B, Tq, p]``; returns (context, weights).

    The context is ``[first-layer context ; last-layer context]``.
    """
    single = q.data.ndim == 2
    if single:
        q = tc.reshape(q, (q.shape[0], 1, q.shape[1]))
    if q.shape[-1] != enc.last.shape[-1]:
        raise DimensionError(f"query width {q.shape[-1]} vs encoder width {enc.last.shape[-1]}")
    if not enc.mask.any(axis=1).all():
        raise ContractError("attention over a fully masked source")
    scores = tc.bmm(q, enc.last, transpose_b=True)  # [B, Tq, Ts]
    alpha = tc.softmax_rows(scores, enc.mask[:, None, :])
    ctx = tc.concat([tc.bmm(alpha, enc.first), tc.bmm(alpha, enc.last)], axis=-1)
    if single:
        B = q.shape[0]
        ctx = tc.reshape(ctx, (B, ctx.shape[-1]))
        alpha = tc.reshape(alpha, (B, alpha.shape[-1]))
    return ctx, alpha


def _softmax_input(model: Seq2SeqModel, first: Tensor, top: Tensor, enc: EncoderStates) -> Tensor:
    ctx, _ = attend(top, enc)
    mixed = tc.tanh(tc.matmul(tc.concat([ctx, top], axis=-1), model.W_a))
    return tc.add(first, mixed)


def decoder_logits(model: Seq2SeqModel, tgt_in, enc: EncoderStates, dropout: DropoutSpec = EVAL,
                   rng: Rng | None = None) -> Tensor:
    """Teacher-forced logits ``[B, T, V]`` for decoder inputs ``tgt_in``."""
    ids = _ids(tgt_in)
    outs = unroll(model.dec_layers, embed(model.dec_embedding, ids), ids != PAD, dropout, rng)
    s = _softmax_input(model, outs[0], outs[-1], enc)
    return project_logits(model.dec_softmax, dropout.apply(s, rng))


def seq2seq_loss(model: Seq2SeqModel, src, tgt, dropout: DropoutSpec = EVAL,
                 rng: Rng | None = None) -> Tensor:
    """Mean per-token NLL of ``tgt[:, 1:]`` given ``src`` and the gold prefix."""
    tgt_ids = _ids(tgt)
    if tgt_ids.shape[1] < 2:
        raise ContractError("target needs BOS and at least one more token")
    enc = encode(model, src, dropout, rng)
    logits = decoder_logits(model, tgt_ids[:, :-1], enc, dropout, rng)
    B, T, V = logits.shape
    targets = tgt_ids[:, 1:]
    return tc.cross_entropy(tc.reshape(logits, (B * T, V)), targets, targets != PAD)


def initial_state(model: Seq2SeqModel, batch_size: int) -> list[tuple[Tensor, Tensor]]:
    return [(Tensor(np.zeros((batch_size, l.output_dim))), Tensor(np.zeros((batch_size, l.hidden))))
            for l in model.dec_layers]


def decode_step(model: Seq2SeqModel, y_prev, state: list[tuple[Tensor, Tensor]], enc: EncoderStates,
                dropout: DropoutSpec = EVAL, rng: Rng | None = None):
    """One decoder step from previous token ids ``[B]``; returns (logits ``[B, V]``, new state)."""
    x = embed(model.dec_embedding, np.asarray(y_prev, dtype=np.int64))
    new_state = []
    outs = []
    for layer, (h, c) in zip(model.dec_layers, state):
        h, c = lstm_step(layer, x, h, c, dropout, rng)
        new_state.append((h, c))
        outs.append(h)
        x = h
    s = _softmax_input(model, outs[0], outs[-1], enc)
    return project_logits(model.dec_softmax, dropout.apply(s, rng)), new_state


def sequence_nll(model: Seq2SeqModel, src, tgt) -> np.ndarray:
    """Per-example summed NLL (float64) under teacher forcing, eval mode."""
    tgt_ids = _ids(tgt)
    with tc.no_grad():
        enc = encode(model, src)
        logits = decoder_logits(model, tgt_ids[:, :-1], enc).data.astype(np.float64)
    lp = logits - logits.max(axis=-1, keepdims=True)
    lp = lp - np.log(np.exp(lp).sum(axis=-1, keepdims=True))
    targets = tgt_ids[:, 1:]
    picked = np.take_along_axis(lp, targets[..., None], axis=-1)[..., 0]
    return -(picked * (targets != PAD)).sum(axis=1)
