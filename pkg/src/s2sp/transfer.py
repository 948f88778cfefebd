"""Copy donor LM weights into a translation model and build the joint objective."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from . import tensor as tc
from .layers import EVAL, Batch, DropoutSpec, SoftmaxLayer
from .lm import LanguageModel, path_loss
from .seq2seq import Seq2SeqModel, seq2seq_loss
from .tensor import ContractError, Rng, Tensor

DONOR_CORPORA = ("large_monolingual", "parallel_only")


class TransferError(ValueError):
    pass


@dataclass(frozen=True)
class AblationMode:
    pretrain_encoder: bool = True
    pretrain_decoder: bool = True
    pretrain_softmax: bool = True
    pretrain_embeddings_only: bool = False
    lm_objective: bool = True
    donor_corpus: str = "large_monolingual"

    def __post_init__(self):
        if self.pretrain_softmax and not self.pretrain_decoder:
            raise ValueError("pretraining the softmax requires pretraining the decoder")
        if self.pretrain_embeddings_only and self.pretrain_softmax:
            raise ValueError("embeddings-only mode cannot transfer the softmax")
        if self.donor_corpus not in DONOR_CORPORA:
            raise ValueError(f"donor_corpus must be one of {DONOR_CORPORA}")

    @property
    def any_transfer(self) -> bool:
        return self.pretrain_encoder or self.pretrain_decoder

    def to_dict(self) -> dict:
        return asdict(self)


# Named rows of the ablation grid.
MODES = {
    "full": AblationMode(),
    "decoder_only": AblationMode(pretrain_encoder=False),
    "encoder_only": AblationMode(pretrain_decoder=False, pretrain_softmax=False),
    "no_softmax": AblationMode(pretrain_softmax=False),
    "embeddings_only": AblationMode(pretrain_softmax=False, pretrain_embeddings_only=True),
    "none": AblationMode(pretrain_encoder=False, pretrain_decoder=False, pretrain_softmax=False),
}


def mode(name: str, **overrides) -> AblationMode:
    base = MODES[name].to_dict()
    base.update(overrides)
    return AblationMode(**base)


@dataclass(frozen=True)
class JointLossWeights:
    seq2seq: float = 1.0
    src_lm: float = 1.0
    tgt_lm: float = 1.0

    def __post_init__(self):
        if min(self.seq2seq, self.src_lm, self.tgt_lm) < 0:
            raise ValueError("loss weights must be nonnegative")


def _copy(name: str, dst: Tensor, src: Tensor) -> None:
    if dst.shape != src.shape:
        raise TransferError(f"cannot transfer {name}: recipient {dst.shape} vs donor {src.shape}")
    dst.data[...] = src.data


def _check_vocab(side: str, model_vocab: int, lm: LanguageModel, vocab=None) -> None:
    if lm.vocab_size != model_vocab:
        raise TransferError(f"{side} vocabulary size {model_vocab} differs from donor's {lm.vocab_size}")
    if vocab is not None and lm.vocab is not None and vocab != lm.vocab:
        raise TransferError(f"{side} vocabulary differs from the donor's")


def transfer_plan(mode: AblationMode) -> dict[str, tuple[str, str]]:
    """Recipient name -> (donor side, donor name) for every copy the mode makes."""
    plan: dict[str, tuple[str, str]] = {}
    lstm = ("W_x", "W_h", "b", "W_proj")
    for side, flag, prefix in (("src", mode.pretrain_encoder, "enc"), ("tgt", mode.pretrain_decoder, "dec")):
        if not flag:
            continue
        plan[f"{prefix}.embedding.table"] = (side, "embedding.table")
        if not mode.pretrain_embeddings_only:
            for w in lstm:
                plan[f"{prefix}.lstm1.{w}"] = (side, f"lstm1.{w}")
            if side == "src":
                for w in ("W", "b"):
                    plan[f"aux_src_softmax.{w}"] = ("src", f"softmax.{w}")
    if mode.pretrain_softmax:
        for w in ("W", "b"):
            plan[f"dec.softmax.{w}"] = ("tgt", f"softmax.{w}")
    return plan


def init_from_lms(model: Seq2SeqModel, src_lm: LanguageModel | None, tgt_lm: LanguageModel | None,
                  mode: AblationMode, aux_src_softmax: SoftmaxLayer | None = None,
                  src_vocab=None, tgt_vocab=None) -> dict[str, str]:
    """Copy donor tensors into ``model`` (and ``aux_src_softmax``) in place.

    Returns a report mapping every recipient parameter name to
    ``"transferred"`` or ``"random"``. Summarisation-style runs pass the
    same LM as both donors; the copies stay independent.
    """
    recipients = model.params()
    if aux_src_softmax is not None:
        recipients.update(aux_src_softmax.params("aux_src_softmax"))
    plan = transfer_plan(mode)
    donors = {}
    if mode.pretrain_encoder:
        if src_lm is None:
            raise TransferError("mode needs a source-side donor LM")
        _check_vocab("source", model.enc_embedding.vocab_size, src_lm, src_vocab)
        donors["src"] = src_lm.params()
    if mode.pretrain_decoder:
        if tgt_lm is None:
            raise TransferError("mode needs a target-side donor LM")
        _check_vocab("target", model.dec_embedding.vocab_size, tgt_lm, tgt_vocab)
        donors["tgt"] = tgt_lm.params()
    report = {name: "random" for name in recipients}
    # Validate every copy before touching anything.
    todo = []
    for name, (side, donor_name) in plan.items():
        if name not in recipients:
            continue
        donor = donors[side].get(donor_name)
        if donor is None:
            raise TransferError(f"donor has no parameter {donor_name} for {name}")
        if recipients[name].shape != donor.shape:
            raise TransferError(
                f"cannot transfer {name}: recipient {recipients[name].shape} vs donor {donor.shape}")
        todo.append((name, donor))
    for name, donor in todo:
        _copy(name, recipients[name], donor)
        report[name] = "transferred"
    return report


def report_json(report: dict[str, str]) -> str:
    return json.dumps(report, indent=2)


def joint_loss(model: Seq2SeqModel, aux_src_softmax: SoftmaxLayer, seq2seq_batch: tuple[Batch, Batch],
               src_mono: Batch | None, tgt_mono: Batch | None,
               weights: JointLossWeights = JointLossWeights(), dropout: DropoutSpec = EVAL,
               rng: Rng | None = None) -> tuple[Tensor, dict[str, Tensor]]:
    """Weighted sum of the translation loss and the two monolingual LM losses.

    The source LM runs encoder embedding -> encoder layer 1 -> auxiliary
    softmax; the target LM runs decoder embedding -> decoder layer 1 ->
    decoder softmax. Terms with zero weight are not computed.
    """
    parts: dict[str, Tensor] = {}
    terms = []
    if weights.seq2seq > 0:
        src, tgt = seq2seq_batch
        parts["seq2seq"] = seq2seq_loss(model, src, tgt, dropout, rng)
        terms.append((weights.seq2seq, parts["seq2seq"]))
    if weights.src_lm > 0:
        if src_mono is None:
            raise ContractError("source LM weight is nonzero but no source batch was given")
        parts["src_lm"] = path_loss(model.enc_embedding, model.enc_layers[0], aux_src_softmax,
                                    src_mono, dropout, rng)
        terms.append((weights.src_lm, parts["src_lm"]))
    if weights.tgt_lm > 0:
        if tgt_mono is None:
            raise ContractError("target LM weight is nonzero but no target batch was given")
        parts["tgt_lm"] = path_loss(model.dec_embedding, model.dec_layers[0], model.dec_softmax,
                                    tgt_mono, dropout, rng)
        terms.append((weights.tgt_lm, parts["tgt_lm"]))
    if not terms:
        raise ContractError("all joint loss weights are zero")
    return tc.weighted_sum(terms), parts
