"""Deterministic synthetic translation task.

Source sentences come from a sparse first-order Markov chain over pseudo
words. The target of a source sentence maps every word through a fixed
bijection and then swaps positions (2i, 2i+1) for every full pair, so a
memoryless word mapper cannot solve it.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

CONSONANTS = "bdfgklmnprstvz"
VOWELS = "aeiou"


@dataclass(frozen=True)
class TaskSpec:
    src_vocab: int = 64
    tgt_vocab: int = 64
    branching: int = 4
    start_support: int = 64
    chain_seed: int = 0
    min_len: int = 5
    max_len: int = 20
    mono_src: int = 50_000
    mono_tgt: int = 50_000
    parallel: int = 2_000
    valid: int = 500
    test: int = 500
    identity_map: bool = False
    reorder: bool = True

    def __post_init__(self):
        if self.src_vocab != self.tgt_vocab:
            raise ValueError("the word mapping is a bijection, so vocab sizes must match")
        if not 1 <= self.branching <= self.src_vocab:
            raise ValueError("branching must lie in [1, src_vocab]")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if min(self.mono_src, self.mono_tgt, self.parallel, self.valid, self.test) < 1:
            raise ValueError("every corpus size must be at least 1")


@dataclass
class Task:
    """The fixed language pair behind a :class:`TaskSpec`."""

    spec: TaskSpec
    src_words: list[str]
    tgt_words: list[str]
    start: np.ndarray        # [V] first-word distribution
    transitions: np.ndarray  # [V, V] row-stochastic
    sigma: np.ndarray        # src index -> tgt index

    @property
    def mapping(self) -> dict[str, str]:
        return {self.src_words[i]: self.tgt_words[self.sigma[i]] for i in range(len(self.src_words))}

    def translate(self, sentence: str) -> str:
        return " ".join(transform(sentence.split(), self.mapping, self.spec.reorder))

    def invert(self, sentence: str) -> str:
        inv = {v: k for k, v in self.mapping.items()}
        return " ".join(inverse_transform(sentence.split(), inv, self.spec.reorder))

    def sample_sources(self, gen: np.random.Generator, n: int) -> list[str]:
        """Draw ``n`` source sentences (chains simulated in lockstep)."""
        s = self.spec
        lengths = gen.integers(s.min_len, s.max_len + 1, size=n)
        u = gen.random((n, s.max_len))
        cum_start = np.cumsum(self.start)
        cum_rows = np.cumsum(self.transitions, axis=1)
        V = len(self.src_words)
        ids = np.empty((n, s.max_len), dtype=np.int64)
        ids[:, 0] = np.minimum(np.searchsorted(cum_start, u[:, 0], side="right"), V - 1)
        for t in range(1, s.max_len):
            rows = cum_rows[ids[:, t - 1]]
            ids[:, t] = np.minimum((rows <= u[:, t:t + 1]).sum(axis=1), V - 1)
        words = self.src_words
        return [" ".join(words[i] for i in ids[k, :lengths[k]]) for k in range(n)]


def _pseudo_words(n: int, gen: np.random.Generator, upper: bool) -> list[str]:
    words: list[str] = []
    seen = set()
    while len(words) < n:
        k = int(gen.integers(2, 4))
        w = "".join(CONSONANTS[gen.integers(len(CONSONANTS))] + VOWELS[gen.integers(len(VOWELS))]
                    for _ in range(k))
        w = w.upper() if upper else w
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


def build_task(spec: TaskSpec) -> Task:
    gen = np.random.default_rng(spec.chain_seed)
    V = spec.src_vocab
    src_words = _pseudo_words(V, gen, upper=False)
    tgt_words = list(src_words) if spec.identity_map else _pseudo_words(V, gen, upper=True)
    start = np.zeros(V)
    support = gen.choice(V, size=min(spec.start_support, V), replace=False)
    start[support] = gen.dirichlet(np.ones(len(support)))
    trans = np.zeros((V, V))
    for row in range(V):
        succ = gen.choice(V, size=spec.branching, replace=False)
        trans[row, succ] = gen.dirichlet(np.ones(spec.branching))
    sigma = np.arange(V) if spec.identity_map else gen.permutation(V)
    return Task(spec, src_words, tgt_words, start, trans, sigma)


def transform(tokens: Sequence[str], mapping: dict[str, str], reorder: bool = True) -> list[str]:
    out = [mapping[t] for t in tokens]
    if reorder:
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
    return out


def inverse_transform(tokens: Sequence[str], inverse: dict[str, str], reorder: bool = True) -> list[str]:
    out = list(tokens)
    if reorder:
        for i in range(0, len(out) - 1, 2):
            out[i], out[i + 1] = out[i + 1], out[i]
    return [inverse[t] for t in out]


def _entropy(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


def sentence_entropy(task: Task) -> float:
    """Exact entropy (nats) of one generated sentence, length included."""
    s = task.spec
    lengths = np.arange(s.min_len, s.max_len + 1)
    p_len = 1.0 / len(lengths)
    row_h = np.array([_entropy(r) for r in task.transitions])
    marg = task.start.copy()
    cum = [0.0]  # cum[k] = sum of transition entropies of the first k steps
    for _ in range(s.max_len - 1):
        cum.append(cum[-1] + float(marg @ row_h))
        marg = marg @ task.transitions
    words = sum(p_len * cum[L - 1] for L in lengths)
    return math.log(len(lengths)) + _entropy(task.start) + words


def optimal_token_nll(task: Task) -> float:
    """Lowest achievable mean NLL per predicted token (each word plus EOS)."""
    s = task.spec
    mean_len = (s.min_len + s.max_len) / 2
    return sentence_entropy(task) / (mean_len + 1)


def optimal_perplexity(task: Task) -> float:
    return math.exp(optimal_token_nll(task))


@dataclass
class Corpora:
    mono_src: list[str]
    mono_tgt: list[str]
    parallel: list[tuple[str, str]]
    valid: list[tuple[str, str]]
    test: list[tuple[str, str]]

    def as_dict(self) -> dict:
        return asdict(self)


def generate(spec: TaskSpec, seed: int) -> tuple[Task, Corpora]:
    """Sample every split; a source sentence string belongs to at most one split."""
    task = build_task(spec)
    gen = np.random.default_rng([seed, spec.chain_seed])
    owner: dict[str, str] = {}

    def draw(split: str, n: int) -> list[str]:
        out: list[str] = []
        while len(out) < n:
            for s in task.sample_sources(gen, min(4096, 2 * (n - len(out)) + 16)):
                if len(out) < n and owner.setdefault(s, split) == split:
                    out.append(s)
        return out

    pairs = {}
    for split, n in (("parallel", spec.parallel), ("valid", spec.valid), ("test", spec.test)):
        pairs[split] = [(s, task.translate(s)) for s in draw(split, n)]
    mono_src = draw("mono_src", spec.mono_src)
    mono_tgt = [task.translate(s) for s in draw("mono_tgt", spec.mono_tgt)]
    return task, Corpora(mono_src, mono_tgt, pairs["parallel"], pairs["valid"], pairs["test"])


def subset(corpus: Sequence, fraction: float, seed: int) -> list:
    """Uniform sample of ``round(fraction * N)`` items; nested across fractions for one seed."""
    n = len(corpus)
    k = int(round(fraction * n))
    if not 0 < fraction <= 1 or k < 1:
        raise ValueError(f"fraction {fraction} of {n} items selects nothing")
    order = np.random.default_rng(seed).permutation(n)
    return [corpus[i] for i in sorted(order[:k])]


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_corpora(out_dir, spec: TaskSpec, seed: int, corpora: Corpora) -> dict:
    """One-sentence-per-line files plus ``manifest.json`` (spec, seed, hashes)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "mono.src": corpora.mono_src,
        "mono.tgt": corpora.mono_tgt,
        "train.src": [s for s, _ in corpora.parallel],
        "train.tgt": [t for _, t in corpora.parallel],
        "valid.src": [s for s, _ in corpora.valid],
        "valid.tgt": [t for _, t in corpora.valid],
        "test.src": [s for s, _ in corpora.test],
        "test.tgt": [t for _, t in corpora.test],
    }
    for name, lines in files.items():
        (out / name).write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest = {"spec": asdict(spec), "seed": seed,
                "files": {name: _sha256(out / name) for name in files}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return manifest


def read_lines(path) -> list[str]:
    return [ln for ln in Path(path).read_text(encoding="utf-8").split("\n") if ln]


def read_corpora(out_dir) -> Corpora:
    d = Path(out_dir)
    rl = lambda n: read_lines(d / n)  # noqa: E731
    return Corpora(rl("mono.src"), rl("mono.tgt"),
                   list(zip(rl("train.src"), rl("train.tgt"))),
                   list(zip(rl("valid.src"), rl("valid.tgt"))),
                   list(zip(rl("test.src"), rl("test.tgt"))))
