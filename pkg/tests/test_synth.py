import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from s2sp.lm import LmConfig, train_lm
from s2sp.metrics import bleu_corpus
from s2sp.synth import (TaskSpec, build_task, generate, optimal_perplexity, read_corpora, sentence_entropy,
                        subset, transform, write_corpora)
from s2sp.tensor import Rng
from s2sp.training import TrainConfig

SMALL = TaskSpec(src_vocab=12, tgt_vocab=12, branching=3, start_support=12, min_len=8, max_len=12,
                 mono_src=4000, mono_tgt=50, parallel=200, valid=1000, test=50)


@pytest.fixture(scope="module")
def small():
    return generate(SMALL, 0)


def test_pair_swap_example():
    m = {c: c.upper() for c in "abcde"}
    assert transform("a b c d".split(), m) == "B A D C".split()
    assert transform("a b c d e".split(), m) == "B A D C E".split()
    assert transform(["a"], m) == ["A"]


def test_identity_without_reordering_copies_single_words():
    spec = TaskSpec(src_vocab=8, tgt_vocab=8, min_len=1, max_len=1, identity_map=True, reorder=False,
                    mono_src=5, mono_tgt=5, parallel=6, valid=1, test=1)
    _, c = generate(spec, 3)
    assert all(s == t and len(s.split()) == 1 for s, t in c.parallel)


def test_spec_validation():
    with pytest.raises(ValueError):
        TaskSpec(src_vocab=8, tgt_vocab=9)
    with pytest.raises(ValueError):
        TaskSpec(min_len=4, max_len=3)
    with pytest.raises(ValueError):
        TaskSpec(valid=0)


def test_task_structure(small):
    task, _ = small
    assert sorted(task.sigma.tolist()) == list(range(12))
    assert np.allclose(task.transitions.sum(axis=1), 1) and task.start.sum() == pytest.approx(1)
    assert ((task.transitions > 0).sum(axis=1) == 3).all()


def test_transform_is_invertible_and_oracle_scores_100(small):
    task, c = small
    pairs = c.parallel + c.valid + c.test
    assert all(task.invert(t) == s for s, t in pairs)
    assert all(task.translate(task.invert(t)) == t for t in c.mono_tgt)
    hyps = [task.translate(s).split() for s, _ in c.valid]
    assert bleu_corpus(hyps, [t.split() for _, t in c.valid]) == 100.0


def test_splits_are_disjoint(small):
    _, c = small
    splits = [set(c.mono_src), {s for s, _ in c.parallel}, {s for s, _ in c.valid},
              {s for s, _ in c.test}]
    for i in range(len(splits)):
        for j in range(i + 1, len(splits)):
            assert not splits[i] & splits[j]


def test_generation_is_deterministic():
    a, b, other = generate(SMALL, 1)[1], generate(SMALL, 1)[1], generate(SMALL, 2)[1]
    assert a == b and a.parallel != other.parallel


def test_sizes_and_lengths(small):
    _, c = small
    assert (len(c.mono_src), len(c.mono_tgt), len(c.parallel), len(c.valid)) == (4000, 50, 200, 1000)
    assert all(8 <= len(s.split()) <= 12 for s in c.mono_src)


def test_entropy_matches_empirical_sentence_nll(small):
    # Raw chain samples: the split corpora are deduplicated, which biases them toward rare sentences.
    task, _ = small
    idx = {w: i for i, w in enumerate(task.src_words)}
    nll = []
    for s in task.sample_sources(np.random.default_rng(5), 20000):
        ids = [idx[w] for w in s.split()]
        lp = math.log(task.start[ids[0]]) - math.log(SMALL.max_len - SMALL.min_len + 1)
        lp += sum(math.log(task.transitions[a, b]) for a, b in zip(ids, ids[1:]))
        nll.append(-lp)
    mean, sem = np.mean(nll), np.std(nll) / math.sqrt(len(nll))
    assert abs(mean - sentence_entropy(task)) < 4 * sem


def test_trained_lm_perplexity_is_close_to_entropy_bound(small):
    task, c = small
    idx = {w: i + 4 for i, w in enumerate(task.src_words)}
    enc = lambda s: [1] + [idx[w] for w in s.split()] + [2]  # noqa: E731
    cfg = LmConfig(d_emb=16, hidden=32, proj=16, dropout=0.0,
                   train=TrainConfig(batch_size=64, max_steps=1000, lr=1e-2, warm_steps=300, decay_every=100,
                                     eval_every=100, patience=3))
    _, log = train_lm(cfg, [enc(s) for s in c.mono_src], Rng(0), [enc(s) for s, _ in c.valid], vocab_size=16)
    bound = optimal_perplexity(task)
    best = min(r["valid_ppl"] for r in log)
    assert bound * 0.97 <= best <= bound * 1.1


@settings(max_examples=50, deadline=None)
@given(st.integers(1, 300), st.integers(0, 2**31))
def test_subsets_are_nested_and_sized(n, seed):
    items = list(range(n))
    prev = set()
    for f in (0.2, 0.5, 1.0):
        if round(f * n) < 1:
            continue
        sub = subset(items, f, seed)
        assert len(sub) == round(f * n) and prev <= set(sub)
        prev = set(sub)
    assert subset(items, 1.0, seed) == items


def test_subset_rejects_empty_selection():
    with pytest.raises(ValueError):
        subset([1, 2], 0.1, 0)
    with pytest.raises(ValueError):
        subset([1, 2], 1.5, 0)


def test_corpora_files_and_manifest_round_trip(tmp_path, small):
    _, c = small
    manifest = write_corpora(tmp_path, SMALL, 0, c)
    assert json.loads((tmp_path / "manifest.json").read_text()) == manifest
    assert manifest["seed"] == 0 and manifest["spec"]["src_vocab"] == 12
    assert set(manifest["files"]) >= {"mono.src", "train.tgt", "valid.src"}
    assert read_corpora(tmp_path) == c


def test_build_task_depends_only_on_chain_seed():
    a, b = build_task(SMALL), build_task(TaskSpec(**{**SMALL.__dict__, "parallel": 7}))
    assert a.src_words == b.src_words and np.array_equal(a.transitions, b.transitions)
