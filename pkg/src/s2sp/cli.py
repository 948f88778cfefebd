"""Command-line entry point: ``s2sp <verb> [options]``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .bpe import MergeTable, Vocab, decode, encode
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .decode import beam_search
from .metrics import bleu_corpus, rouge_l, rouge_n
from .synth import read_corpora, read_lines, write_corpora
from .transfer import DONOR_CORPORA

log = logging.getLogger("s2sp")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "out", None):
        cfg = cfg.replace(output_dir=str(args.out))
    if getattr(args, "seeds", None):
        cfg = cfg.replace(seeds=[int(s) for s in args.seeds.split(",")])
    return cfg


def _data(cfg: ExperimentConfig, data_dir):
    from .experiment import prepare_data
    return prepare_data(cfg, read_corpora(data_dir) if data_dir else None)


def write_log_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.DictWriter(f, fieldnames=["step", "train_loss", "valid_ppl", "lr"], lineterminator="\n",
                           extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def cmd_gen_data(args) -> int:
    from .experiment import prepare_data
    from .synth import generate
    cfg = _config(args)
    out = Path(args.out)
    _, corpora = generate(cfg.task, cfg.data_seed)
    write_corpora(out, cfg.task, cfg.data_seed, corpora)
    data = prepare_data(cfg, corpora)
    data.src_bpe.save(out / "merges.src")
    data.tgt_bpe.save(out / "merges.tgt")
    data.src_vocab.save(out / "vocab.src")
    data.tgt_vocab.save(out / "vocab.tgt")
    cfg.save(out / "config.json")
    print(json.dumps({"out": str(out), "src_vocab": len(data.src_vocab), "tgt_vocab": len(data.tgt_vocab)}))
    return 0


def cmd_pretrain(args) -> int:
    from .experiment import run_pretrain, save_lm
    cfg = _config(args)
    data = _data(cfg, args.data)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    donors = run_pretrain(cfg, data, args.seed, args.donor_corpus)
    save_lm(out / "src_lm.ckpt", donors.src)
    save_lm(out / "tgt_lm.ckpt", donors.tgt)
    for side, rows in donors.logs.items():
        write_log_csv(out / f"lm_log_{side}.csv", rows)
    summary = {"seed": args.seed, "valid_ppl": donors.valid_ppl, "config_hash": cfg.hash()}
    (out / "pretrain.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(summary))
    return 0


def cmd_finetune(args) -> int:
    from .experiment import Donors, load_lm, run_finetune, snapshot_params
    from .transfer import mode, report_json
    cfg = _config(args)
    data = _data(cfg, args.data)
    m = mode(args.mode, **({"lm_objective": False} if args.no_lm_objective else {}))
    donors = None
    if m.any_transfer:
        if not args.donors:
            raise SystemExit(f"mode {args.mode!r} needs --donors")
        d = Path(args.donors)
        donors = Donors(load_lm(d / "src_lm.ckpt", data.src_vocab), load_lm(d / "tgt_lm.ckpt", data.tgt_vocab),
                        {}, {})
    res = run_finetune(cfg, data, donors, args.seed, m, args.fraction)
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    arrays = snapshot_params(res)
    save_checkpoint(out / "model.ckpt", Checkpoint(arrays, step=res.steps))
    write_log_csv(out / "train_log.csv", res.log)
    (out / "transfer_report.json").write_text(report_json(res.report) + "\n", encoding="utf-8")
    summary = {**res.summary(), "seed": args.seed, "mode": args.mode, "fraction": args.fraction,
               "config_hash": cfg.hash(), "config": cfg.to_dict()}
    (out / "finetune.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps({k: summary[k] for k in ("valid_ppl", "train_ppl", "valid_bleu", "steps")}))
    return 0


def cmd_ablate(args) -> int:
    from .experiment import run_ablation_grid
    cfg = _config(args)
    res = run_ablation_grid(cfg, _data(cfg, args.data))
    for row in res["rows"]:
        print(f"{row['mode']:>22s}  median BLEU {row['median_bleu']:6.2f}  delta {row['median_delta_bleu']:+6.2f}")
    return 0


def cmd_data_fraction(args) -> int:
    from .experiment import run_data_fraction
    cfg = _config(args)
    fractions = [float(f) for f in args.fractions.split(",")] if args.fractions else None
    res = run_data_fraction(cfg, fractions, _data(cfg, args.data))
    for row in res["rows"]:
        print(f"fraction {row['fraction']:.2f}  median gap {row['median_gap']:+6.2f}")
    return 0


def cmd_decode(args) -> int:
    from .experiment import seq2seq_from_tensors
    d = Path(args.data)
    src_bpe, src_vocab = MergeTable.load(d / "merges.src"), Vocab.load(d / "vocab.src")
    tgt_vocab = Vocab.load(d / "vocab.tgt")
    model, _ = seq2seq_from_tensors(load_checkpoint(args.model).tensors)
    lines = read_lines(args.input) if args.input else [ln.strip() for ln in sys.stdin if ln.strip()]
    for line in lines:
        res = beam_search(model, encode(src_vocab, src_bpe, line), args.beam, length_norm=args.length_norm)
        print(decode(tgt_vocab, res.best.tokens))
    return 0


def cmd_metrics(args) -> int:
    hyps, refs = read_lines_keep(args.hyp), read_lines_keep(args.ref)
    if len(hyps) != len(refs):
        raise SystemExit(f"{len(hyps)} hypotheses but {len(refs)} references")
    if args.metric == "bleu":
        out = {"bleu": bleu_corpus([h.split() for h in hyps], [r.split() for r in refs])}
    else:
        out = {}
        for name, (p, r, f) in (("rouge1", rouge_n(hyps, refs, 1)), ("rouge2", rouge_n(hyps, refs, 2)),
                                ("rougeL", rouge_l(hyps, refs))):
            out[name] = {"precision": p, "recall": r, "f1": f}
    print(json.dumps(out, sort_keys=True))
    return 0


def read_lines_keep(path) -> list[str]:
    """Lines of a file; empty lines are kept so hypotheses stay aligned."""
    text = Path(path).read_text(encoding="utf-8")
    lines = text.split("\n")
    return lines[:-1] if lines and lines[-1] == "" else lines


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="s2sp")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        s = sub.add_parser(name, help=help_)
        s.set_defaults(fn=fn)
        return s

    def common(s):
        s.add_argument("--config", help="JSON experiment config (defaults if omitted)")
        s.add_argument("--data", help="corpora directory from gen-data (regenerated if omitted)")
        s.add_argument("--out", help="output directory (overrides the config)")

    s = verb("gen-data", cmd_gen_data, "write synthetic corpora, manifest, merges and vocab")
    s.add_argument("--config")
    s.add_argument("--out", required=True)

    s = verb("pretrain", cmd_pretrain, "train source and target donor LMs")
    common(s)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--donor-corpus", choices=list(DONOR_CORPORA), default=None)

    s = verb("finetune", cmd_finetune, "initialise from donors and train the translation model")
    common(s)
    s.add_argument("--donors", help="directory holding src_lm.ckpt and tgt_lm.ckpt")
    s.add_argument("--mode", default="full")
    s.add_argument("--no-lm-objective", action="store_true")
    s.add_argument("--fraction", type=float, default=1.0)
    s.add_argument("--seed", type=int, default=0)

    s = verb("ablate", cmd_ablate, "run the ablation grid and write ablation.csv/json")
    common(s)
    s.add_argument("--seeds", help="comma-separated seeds overriding the config")

    s = verb("data-fraction", cmd_data_fraction, "pretrained-vs-none gap per parallel-data fraction")
    common(s)
    s.add_argument("--seeds")
    s.add_argument("--fractions", help="comma-separated fractions, e.g. 0.2,1.0")

    s = verb("decode", cmd_decode, "beam-search translate source lines")
    s.add_argument("--model", required=True, help="checkpoint from finetune")
    s.add_argument("--data", required=True, help="directory with merges.src, vocab.src, vocab.tgt")
    s.add_argument("--input", help="source file (stdin if omitted)")
    s.add_argument("--beam", type=int, default=10)
    s.add_argument("--length-norm", action="store_true")

    s = verb("metrics", cmd_metrics, "score hypotheses against references; prints JSON")
    s.add_argument("metric", choices=["bleu", "rouge"])
    s.add_argument("--hyp", required=True)
    s.add_argument("--ref", required=True)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
