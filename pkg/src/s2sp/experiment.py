"""End-to-end pipeline: data, donor pretraining, fine-tuning, evaluation, studies."""

from __future__ import annotations

import csv
import json
import logging
import math
import os
import statistics
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .bpe import MergeTable, Vocab, decode, encode, learn_bpe, word_counts
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .decode import beam_search
from .layers import Batch, DropoutSpec, EmbeddingLayer, LstmLayer, SoftmaxLayer
from .lm import LanguageModel, corpus_nll, train_lm
from .metrics import bleu_corpus
from .params import snapshot
from .seq2seq import Seq2SeqModel, sequence_nll
from .synth import Corpora, Task, generate, subset
from .tensor import Rng, Tensor
from .training import batches, eval_batches, fit, minibatches
from .transfer import MODES, AblationMode, JointLossWeights, init_from_lms, joint_loss

log = logging.getLogger(__name__)

# Reference ΔBLEU values for the full-scale English→German ablation; context only.
REFERENCE_ABLATION_DELTAS = {"none": -2.0, "encoder_only": -1.6, "decoder_only": -1.0, "no_softmax": -1.6}
REFERENCE_FRACTION_GAPS = {1.0: 2.0, 0.2: 3.8}

_TAGS = {"pretrain-src": 1, "pretrain-tgt": 2, "pretrain-shared": 3, "finetune": 4}


def derive_seed(seed: int, tag: str, extra: int = 0) -> int:
    return (int(seed) << 20) ^ (_TAGS[tag] << 12) ^ int(extra)


def threads() -> int:
    try:
        return max(1, int(os.environ.get("S2SP_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# data


@dataclass
class DataBundle:
    task: Task
    corpora: Corpora
    src_bpe: MergeTable
    tgt_bpe: MergeTable
    src_vocab: Vocab
    tgt_vocab: Vocab
    mono_src: list[list[int]]
    mono_tgt: list[list[int]]
    train: list[tuple[list[int], list[int]]]
    valid: list[tuple[list[int], list[int]]]
    test: list[tuple[list[int], list[int]]]


def prepare_data(cfg: ExperimentConfig, corpora: Corpora | None = None) -> DataBundle:
    task, generated = generate(cfg.task, cfg.data_seed)
    corpora = corpora or generated
    src_text = corpora.mono_src + [s for s, _ in corpora.parallel]
    tgt_text = corpora.mono_tgt + [t for _, t in corpora.parallel]
    if cfg.shared_lm:
        src_bpe = tgt_bpe = learn_bpe(word_counts(src_text + tgt_text), cfg.bpe_merges)
        src_vocab = tgt_vocab = Vocab.build(src_bpe, src_text + tgt_text)
    else:
        src_bpe = learn_bpe(word_counts(src_text), cfg.bpe_merges)
        tgt_bpe = learn_bpe(word_counts(tgt_text), cfg.bpe_merges)
        src_vocab = Vocab.build(src_bpe, src_text)
        tgt_vocab = Vocab.build(tgt_bpe, tgt_text)
    es = lambda s: encode(src_vocab, src_bpe, s)  # noqa: E731
    et = lambda s: encode(tgt_vocab, tgt_bpe, s)  # noqa: E731
    pairs = lambda ps: [(es(s), et(t)) for s, t in ps]  # noqa: E731
    return DataBundle(task, corpora, src_bpe, tgt_bpe, src_vocab, tgt_vocab,
                      [es(s) for s in corpora.mono_src], [et(t) for t in corpora.mono_tgt],
                      pairs(corpora.parallel), pairs(corpora.valid), pairs(corpora.test))


def _donor_corpora(data: DataBundle, donor_corpus: str) -> tuple[list, list]:
    if donor_corpus == "parallel_only":
        return [s for s, _ in data.train], [t for _, t in data.train]
    return data.mono_src, data.mono_tgt


# ---------------------------------------------------------------------------
# pretraining


@dataclass
class Donors:
    src: LanguageModel
    tgt: LanguageModel
    logs: dict[str, list[dict]]
    valid_ppl: dict[str, float]


def lm_valid_ppl(lm: LanguageModel, corpus: Sequence[Sequence[int]]) -> float:
    nll, n = corpus_nll(lm.embedding, lm.lstm1, lm.softmax, eval_batches(corpus, 128))
    return math.exp(nll / n)


def run_pretrain(cfg: ExperimentConfig, data: DataBundle, seed: int,
                 donor_corpus: str | None = None) -> Donors:
    """Train the source and target donor LMs (or one shared LM)."""
    donor_corpus = donor_corpus or cfg.mode.donor_corpus
    src_corpus, tgt_corpus = _donor_corpora(data, donor_corpus)
    valid_src = [s for s, _ in data.valid]
    valid_tgt = [t for _, t in data.valid]
    if cfg.shared_lm:
        lm, lg = train_lm(cfg.lm, src_corpus + tgt_corpus, Rng(derive_seed(seed, "pretrain-shared")),
                          valid_src + valid_tgt, data.src_vocab)
        return Donors(lm, lm, {"shared": lg}, {"shared": lm_valid_ppl(lm, valid_src + valid_tgt)})
    src, lg_s = train_lm(cfg.lm, src_corpus, Rng(derive_seed(seed, "pretrain-src")), valid_src, data.src_vocab)
    tgt, lg_t = train_lm(cfg.lm, tgt_corpus, Rng(derive_seed(seed, "pretrain-tgt")), valid_tgt, data.tgt_vocab)
    return Donors(src, tgt, {"src": lg_s, "tgt": lg_t},
                  {"src": lm_valid_ppl(src, valid_src), "tgt": lm_valid_ppl(tgt, valid_tgt)})


# ---------------------------------------------------------------------------
# evaluation


def seq2seq_perplexity(model: Seq2SeqModel, pairs: Sequence, batch_size: int = 128) -> float:
    nll, n = 0.0, 0
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        src = Batch.from_sequences([s for s, _ in chunk])
        tgt = Batch.from_sequences([t for _, t in chunk])
        nll += float(sequence_nll(model, src, tgt).sum())
        n += int((tgt.ids[:, 1:] != 0).sum())
    return math.exp(nll / n)


def target_lm_perplexity(model: Seq2SeqModel, corpus: Sequence[Sequence[int]]) -> float:
    """Perplexity of the decoder's LM path (embedding, layer 1, softmax)."""
    nll, n = corpus_nll(model.dec_embedding, model.dec_layers[0], model.dec_softmax, eval_batches(corpus, 128))
    return math.exp(nll / n)


def translate(model, data: DataBundle, pairs: Sequence, beam: int, length_norm: bool = False) -> list[str]:
    def one(pair):
        return decode(data.tgt_vocab, beam_search(model, pair[0], beam, length_norm=length_norm).best.tokens)

    n = threads()
    if n == 1:
        return [one(p) for p in pairs]
    with ThreadPoolExecutor(max_workers=n) as pool:
        return list(pool.map(one, pairs))


def corpus_bleu(model, data: DataBundle, pairs: Sequence, beam: int, length_norm: bool = False) -> float:
    hyps = translate(model, data, pairs, beam, length_norm)
    refs = [decode(data.tgt_vocab, t) for _, t in pairs]
    return bleu_corpus([h.split() for h in hyps], [r.split() for r in refs])


# ---------------------------------------------------------------------------
# fine-tuning


@dataclass
class FinetuneResult:
    model: Seq2SeqModel
    aux_src_softmax: SoftmaxLayer
    report: dict[str, str]
    log: list[dict]
    valid_ppl: float
    train_ppl: float
    valid_bleu: float
    tgt_lm_ppl_init: float
    tgt_lm_ppl_final: float
    steps: int
    extra: dict = field(default_factory=dict)

    @property
    def generalization_gap(self) -> float:
        return self.valid_ppl - self.train_ppl

    @property
    def forgetting(self) -> float:
        return self.tgt_lm_ppl_final - self.tgt_lm_ppl_init

    def summary(self) -> dict:
        return {"valid_ppl": self.valid_ppl, "train_ppl": self.train_ppl, "valid_bleu": self.valid_bleu,
                "tgt_lm_ppl_init": self.tgt_lm_ppl_init, "tgt_lm_ppl_final": self.tgt_lm_ppl_final,
                "generalization_gap": self.generalization_gap, "forgetting": self.forgetting,
                "steps": self.steps,
                "transferred": sorted(k for k, v in self.report.items() if v == "transferred")}


def build_model(cfg: ExperimentConfig, data: DataBundle, seed: int) -> tuple[Seq2SeqModel, SoftmaxLayer]:
    rng = Rng(derive_seed(seed, "finetune"))
    model = Seq2SeqModel.init(len(data.src_vocab), len(data.tgt_vocab), cfg.model, rng.spawn())
    aux = SoftmaxLayer.init(cfg.model.proj, len(data.src_vocab), rng.spawn())
    return model, aux


def run_finetune(cfg: ExperimentConfig, data: DataBundle, donors: Donors | None, seed: int,
                 mode: AblationMode | None = None, fraction: float = 1.0,
                 evaluate_bleu: bool = True) -> FinetuneResult:
    """Initialise from donors per ``mode`` and train on the joint objective.

    The returned model is the checkpoint with the lowest validation perplexity.
    """
    mode = mode or cfg.mode
    model, aux = build_model(cfg, data, seed)
    report = init_from_lms(model, donors.src if donors else None, donors.tgt if donors else None, mode, aux,
                           data.src_vocab, data.tgt_vocab)
    train_pairs = data.train if fraction >= 1.0 else subset(data.train, fraction, seed)
    weights = cfg.weights if mode.lm_objective else JointLossWeights(cfg.weights.seq2seq, 0.0, 0.0)
    mono_src, mono_tgt = _donor_corpora(data, mode.donor_corpus)
    rng = Rng(derive_seed(seed, "finetune", 1))
    bs = cfg.finetune.batch_size
    par = minibatches(train_pairs, bs, rng.spawn())
    src_stream = batches(mono_src, bs, rng.spawn())
    tgt_stream = batches(mono_tgt, bs, rng.spawn())
    drop_rng = rng.spawn()
    drop = DropoutSpec(cfg.dropout)
    params = {**model.params(), **aux.params("aux_src_softmax")}
    valid_tgt = [t for _, t in data.valid]
    tgt_init = target_lm_perplexity(model, valid_tgt)

    def step_loss(step):
        pb = next(par)
        src = Batch.from_sequences([s for s, _ in pb])
        tgt = Batch.from_sequences([t for _, t in pb])
        sb = next(src_stream) if weights.src_lm > 0 else None
        tb = next(tgt_stream) if weights.tgt_lm > 0 else None
        total, _ = joint_loss(model, aux, (src, tgt), sb, tb, weights, drop, drop_rng)
        return total

    train_log = fit(params, step_loss, lambda: seq2seq_perplexity(model, data.valid), cfg.finetune)
    limit = cfg.valid_bleu_limit or len(data.valid)
    bleu = corpus_bleu(model, data, data.valid[:limit], cfg.beam, cfg.length_norm) if evaluate_bleu else float("nan")
    train_eval = train_pairs[:len(data.valid)]
    return FinetuneResult(model, aux, report, train_log, min(r["valid_ppl"] for r in train_log),
                          seq2seq_perplexity(model, train_eval), bleu, tgt_init,
                          target_lm_perplexity(model, valid_tgt), train_log[-1]["step"])


# ---------------------------------------------------------------------------
# checkpoints


def params_checkpoint(params: dict[str, Tensor], step: int = 0, rng_state: int | None = None) -> Checkpoint:
    return Checkpoint({k: v.data.astype(np.float32) for k, v in params.items()}, step, rng_state)


def lm_from_tensors(t: dict[str, np.ndarray], vocab: Vocab | None = None) -> LanguageModel:
    P = lambda k: Tensor(t[k], requires_grad=True)  # noqa: E731
    return LanguageModel(EmbeddingLayer(P("embedding.table")),
                         LstmLayer(P("lstm1.W_x"), P("lstm1.W_h"), P("lstm1.b"),
                                   P("lstm1.W_proj") if "lstm1.W_proj" in t else None),
                         SoftmaxLayer(P("softmax.W"), P("softmax.b")), vocab)


def seq2seq_from_tensors(t: dict[str, np.ndarray]) -> tuple[Seq2SeqModel, SoftmaxLayer | None]:
    P = lambda k: Tensor(t[k], requires_grad=True)  # noqa: E731

    def stack(prefix):
        layers, i = [], 1
        while f"{prefix}.lstm{i}.W_x" in t:
            q = f"{prefix}.lstm{i}"
            layers.append(LstmLayer(P(f"{q}.W_x"), P(f"{q}.W_h"), P(f"{q}.b"),
                                    P(f"{q}.W_proj") if f"{q}.W_proj" in t else None))
            i += 1
        return layers

    model = Seq2SeqModel(EmbeddingLayer(P("enc.embedding.table")), stack("enc"),
                         EmbeddingLayer(P("dec.embedding.table")), stack("dec"), P("attn.W_a"),
                         SoftmaxLayer(P("dec.softmax.W"), P("dec.softmax.b")))
    aux = SoftmaxLayer(P("aux_src_softmax.W"), P("aux_src_softmax.b")) if "aux_src_softmax.W" in t else None
    return model, aux


def save_lm(path, lm: LanguageModel) -> None:
    save_checkpoint(path, params_checkpoint(lm.params()))


def load_lm(path, vocab: Vocab | None = None) -> LanguageModel:
    return lm_from_tensors(load_checkpoint(path).tensors, vocab)


# ---------------------------------------------------------------------------
# reports


def artifact_version() -> str:
    import subprocess
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             cwd=Path(__file__).resolve().parent, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def write_report(out_dir, stem: str, rows: list[dict], meta: dict) -> tuple[Path, Path]:
    """Write ``<stem>.csv`` and ``<stem>.json`` side by side."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path, json_path = out / f"{stem}.csv", out / f"{stem}.json"
    keys: list[str] = []
    for r in rows:
        keys += [k for k in r if k not in keys]
    with csv_path.open("w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (json.dumps(v) if isinstance(v, (list, dict)) else v) for k, v in r.items()})
    json_path.write_text(json.dumps({**meta, "rows": rows}, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return csv_path, json_path


def _row_meta(cfg: ExperimentConfig, seed) -> dict:
    return {"config_hash": cfg.hash(), "seed": seed, "version": artifact_version()}


# ---------------------------------------------------------------------------
# studies


def grid_modes() -> list[tuple[str, AblationMode]]:
    rows = [(name, MODES[name]) for name in
            ("full", "decoder_only", "encoder_only", "no_softmax", "embeddings_only", "none")]
    rows += [("full_no_lm", AblationMode(lm_objective=False)),
             ("none_no_lm", AblationMode(False, False, False, lm_objective=False)),
             ("full_parallel_donors", AblationMode(donor_corpus="parallel_only"))]
    return rows


class DonorCache:
    """Pretrains each (seed, donor corpus) pair once."""

    def __init__(self, cfg: ExperimentConfig, data: DataBundle):
        self.cfg, self.data = cfg, data
        self._cache: dict = {}

    def get(self, seed: int, donor_corpus: str) -> Donors:
        key = (seed, donor_corpus)
        if key not in self._cache:
            log.info("pretraining donors seed=%s corpus=%s", seed, donor_corpus)
            self._cache[key] = run_pretrain(self.cfg, self.data, seed, donor_corpus)
        return self._cache[key]


def _median(xs):
    return float(statistics.median(xs))


def run_ablation_grid(cfg: ExperimentConfig, data: DataBundle | None = None,
                      modes: list[tuple[str, AblationMode]] | None = None,
                      donors: DonorCache | None = None) -> dict:
    """ΔBLEU of every ablation against the full model, median over seeds."""
    data = data or prepare_data(cfg)
    donors = donors or DonorCache(cfg, data)
    modes = modes or grid_modes()
    per_seed: dict[str, dict[int, FinetuneResult]] = {}
    for name, m in modes:
        per_seed[name] = {}
        for seed in cfg.seeds:
            d = donors.get(seed, m.donor_corpus) if m.any_transfer else None
            per_seed[name][seed] = run_finetune(cfg, data, d, seed, m)
            log.info("ablation %s seed=%s bleu=%.2f", name, seed, per_seed[name][seed].valid_bleu)
    full = per_seed["full"]
    rows = []
    for name, m in modes:
        res = per_seed[name]
        deltas = [res[s].valid_bleu - full[s].valid_bleu for s in cfg.seeds]
        rows.append({"mode": name, **m.to_dict(), "median_bleu": _median([r.valid_bleu for r in res.values()]),
                     "median_delta_bleu": _median(deltas), "deltas": deltas,
                     "bleu_per_seed": [res[s].valid_bleu for s in cfg.seeds],
                     "reference_delta": REFERENCE_ABLATION_DELTAS.get(name), **_row_meta(cfg, cfg.seeds)})
    meta = {"config": cfg.to_dict(), "baseline": "full", **_row_meta(cfg, cfg.seeds)}
    write_report(cfg.output_dir, "ablation", rows, meta)
    return {"rows": rows, "results": per_seed}


def run_data_fraction(cfg: ExperimentConfig, fractions: Sequence[float] | None = None,
                      data: DataBundle | None = None, donors: DonorCache | None = None) -> dict:
    """Pretrained-vs-none BLEU gap per parallel-data fraction; both use the LM objective."""
    fractions = list(fractions or cfg.fractions)
    if not all(0 < f <= 1 for f in fractions):
        raise ValueError("fractions must lie in (0, 1]")
    data = data or prepare_data(cfg)
    donors = donors or DonorCache(cfg, data)
    modes = {"pretrained": MODES["full"], "none": MODES["none"]}
    results: dict[float, dict[str, dict[int, FinetuneResult]]] = {}
    rows = []
    for f in fractions:
        results[f] = {name: {} for name in modes}
        for seed in cfg.seeds:
            for name, m in modes.items():
                d = donors.get(seed, m.donor_corpus) if m.any_transfer else None
                results[f][name][seed] = run_finetune(cfg, data, d, seed, m, fraction=f)
                log.info("fraction %.2f %s seed=%s bleu=%.2f", f, name, seed,
                         results[f][name][seed].valid_bleu)
        pre = [results[f]["pretrained"][s].valid_bleu for s in cfg.seeds]
        non = [results[f]["none"][s].valid_bleu for s in cfg.seeds]
        gaps = [a - b for a, b in zip(pre, non)]
        rows.append({"fraction": f, "median_gap": _median(gaps), "gaps": gaps,
                     "pretrained_bleu": pre, "none_bleu": non,
                     "median_pretrained_bleu": _median(pre), "median_none_bleu": _median(non),
                     "num_seeds": len(cfg.seeds), "reference_gap": REFERENCE_FRACTION_GAPS.get(f),
                     **_row_meta(cfg, cfg.seeds)})
    meta = {"config": cfg.to_dict(), **_row_meta(cfg, cfg.seeds)}
    write_report(cfg.output_dir, "data_fraction", rows, meta)
    return {"rows": rows, "results": results}


def snapshot_params(result: FinetuneResult) -> dict[str, np.ndarray]:
    return snapshot({**result.model.params(), **result.aux_src_softmax.params("aux_src_softmax")})


def run_trend_study(cfg: ExperimentConfig, data: DataBundle | None = None,
                    donors: DonorCache | None = None) -> dict:
    """Everything the three trend checks need, one pass over ``cfg.seeds``.

    Per seed: full and none at every fraction (both with the LM objective),
    plus full without the LM objective on all parallel data. Writes
    ``trends.csv``/``trends.json`` with one row per (run, seed).
    """
    data = data or prepare_data(cfg)
    donors = donors or DonorCache(cfg, data)
    frac = run_data_fraction(cfg, data=data, donors=donors)
    nolm = AblationMode(lm_objective=False)
    rows = []
    for seed in cfg.seeds:
        runs = {f"{name}@{f:g}": frac["results"][f][name][seed]
                for f in frac["results"] for name in ("pretrained", "none")}
        runs["pretrained_no_lm@1"] = run_finetune(cfg, data, donors.get(seed, nolm.donor_corpus), seed, nolm)
        d = donors.get(seed, cfg.mode.donor_corpus)
        for run, res in runs.items():
            rows.append({"run": run, "seed": seed, **{k: v for k, v in res.summary().items() if k != "transferred"},
                         "donor_valid_ppl_src": d.valid_ppl.get("src", d.valid_ppl.get("shared")),
                         "donor_valid_ppl_tgt": d.valid_ppl.get("tgt", d.valid_ppl.get("shared")),
                         **_row_meta(cfg, seed)})
    meta = {"config": cfg.to_dict(), "fraction_rows": frac["rows"], **_row_meta(cfg, cfg.seeds)}
    write_report(cfg.output_dir, "trends", rows, meta)
    return {"rows": rows, "fraction_rows": frac["rows"]}
