"""Small models, batches and oracles shared across test modules."""

import copy
import itertools

import numpy as np

from s2sp.layers import BOS, EOS, PAD, Batch, SoftmaxLayer
from s2sp.lm import LanguageModel, LmConfig
from s2sp.seq2seq import Seq2SeqConfig, Seq2SeqModel, sequence_nll
from s2sp.tensor import Rng, no_grad

TINY = Seq2SeqConfig(d_emb=4, hidden=5, proj=3, enc_layers=2, dec_layers=2, upper_hidden=6)
TINY_LM = LmConfig(d_emb=4, hidden=5, proj=3)


def tiny_model(seed=0, V=8, cfg=TINY, scale=1.0):
    """Tiny translation model plus auxiliary source softmax; ``scale`` inflates weights."""
    rng = Rng(seed)
    model = Seq2SeqModel.init(V, V, cfg, rng)
    aux = SoftmaxLayer.init(cfg.proj, V, rng)
    if scale != 1.0:
        for t in list(model.params().values()) + [aux.W]:
            t.data[...] *= scale
    return model, aux


def tiny_lm(seed=0, V=8, cfg=TINY_LM):
    return LanguageModel.init(V, cfg, Rng(seed))


def random_batch(gen, B, T, V, min_len=2):
    """Rows [BOS, tokens..., EOS] of random length, padded."""
    seqs = []
    for _ in range(B):
        n = int(gen.integers(min_len, T + 1))
        body = gen.integers(4, V, size=max(n - 2, 0)).tolist()
        seqs.append([1] + body + [2])
    return Batch.from_sequences(seqs)


# Extended precision for finite-difference oracles: the relative-error floor
# of 1e-8 is below what float64 central differences can resolve.
FD_DTYPE = np.longdouble
FD_MODEL = Seq2SeqConfig(d_emb=3, hidden=3, proj=2, enc_layers=2, dec_layers=2, upper_hidden=3)


def randomize(params, gen, std=0.5):
    """Overwrite parameters with N(0, std^2) so no gradient is vanishingly small."""
    for p in params.values():
        p.data[...] = gen.normal(scale=std, size=p.shape)


def trained_toy_model(seed=0, V=6, steps=400, lr=3e-3):
    """Seq2seq fitted briefly to reversal of short strings over the content ids 4..V-1.

    With V=6 the decoder can emit four ids (EOS, UNK and two content ids).
    Training is short on purpose: the output distribution is peaked but
    not deterministic, so beam and greedy can disagree.
    """
    from s2sp.seq2seq import seq2seq_loss
    from s2sp.training import TrainConfig, fit

    gen = np.random.default_rng(seed)
    cfg = Seq2SeqConfig(d_emb=8, hidden=12, proj=8, enc_layers=2, dec_layers=2, upper_hidden=12)
    model = Seq2SeqModel.init(V, V, cfg, Rng(seed))

    def pairs(n):
        out = []
        for _ in range(n):
            body = gen.integers(4, V, size=int(gen.integers(1, 3))).tolist()
            out.append(([1] + body + [2], [1] + body[::-1] + [2]))
        return out

    data = pairs(64)
    src = Batch.from_sequences([s for s, _ in data])
    tgt = Batch.from_sequences([t for _, t in data])
    train = TrainConfig(max_steps=steps, lr=lr, warm_steps=steps, eval_every=steps, patience=1)

    def train_ppl():
        with no_grad():
            return float(np.exp(seq2seq_loss(model, src, tgt).item()))

    fit(model.params(), lambda step: seq2seq_loss(model, src, tgt), train_ppl, train)
    content = range(4, V)
    sources = [[1, a, 2] for a in content] + [[1, a, b, 2] for a in content for b in content]
    return model, sources


def to_f64(model):
    model = copy.deepcopy(model)
    for p in model.params().values():
        p.data = p.data.astype(np.float64)
    return model


def rescore(model, src, tokens):
    """Teacher-forced log-probability of ``tokens`` (starting with BOS)."""
    return -float(sequence_nll(model, Batch(np.array([src])), Batch(np.array([tokens])))[0])


def enumerate_outputs(emittable, max_len):
    """Every terminal output: EOS-terminated up to max_len, or unfinished at exactly max_len."""
    body = [v for v in emittable if v != EOS]
    for n in range(max_len):
        for seq in itertools.product(body, repeat=n):
            yield [BOS, *seq, EOS]
    for seq in itertools.product(body, repeat=max_len):
        yield [BOS, *seq]


def exhaustive_best(model, src, max_len=3):
    V = model.dec_softmax.vocab_size
    emittable = [v for v in range(V) if v not in (PAD, BOS)]
    scored = [(rescore(model, src, seq), seq) for seq in enumerate_outputs(emittable, max_len)]
    return len(emittable), max(scored, key=lambda x: x[0])


# Acceptance criterion number -> (passed, detail), printed in the terminal summary.
ACCEPTANCE: dict = {}
