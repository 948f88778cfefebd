"""Byte-pair encoding: learn merges from word counts, apply them, map to ids."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .layers import BOS, EOS, NUM_RESERVED, PAD, UNK

END = "</w>"
RESERVED = ("<pad>", "<s>", "</s>", "<unk>")


def split_word(word: str) -> tuple[str, ...]:
    return tuple(word[:-1]) + (word[-1] + END,)


@dataclass(frozen=True)
class MergeTable:
    merges: tuple[tuple[str, str], ...] = ()
    _cache: dict = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if len(set(self.merges)) != len(self.merges):
            raise ValueError("merge table contains duplicate pairs")

    def __len__(self):
        return len(self.merges)

    def save(self, path) -> None:
        lines = ["#version: s2sp-bpe 1"] + [f"{a} {b}" for a, b in self.merges]
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "MergeTable":
        merges = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            left, right = line.split(" ")
            merges.append((left, right))
        return cls(tuple(merges))


def _merge_symbols(symbols: tuple[str, ...], pair: tuple[str, str]) -> tuple[str, ...]:
    a, b = pair
    out = []
    i = 0
    while i < len(symbols):
        if i + 1 < len(symbols) and symbols[i] == a and symbols[i + 1] == b:
            out.append(a + b)
            i += 2
        else:
            out.append(symbols[i])
            i += 1
    return tuple(out)


def learn_bpe(corpus: Mapping[str, int], num_merges: int) -> MergeTable:
    """Greedy BPE over a word-frequency map.

    The most frequent adjacent pair is merged each round; ties go to the
    lexicographically smallest ``(left, right)``. Learning stops early once
    no pair occurs at least twice.
    """
    if not corpus:
        raise ValueError("learn_bpe needs a nonempty corpus")
    words = {split_word(w): n for w, n in corpus.items()}
    merges = []
    for _ in range(num_merges):
        pairs: Counter = Counter()
        for sym, n in words.items():
            for pair in zip(sym, sym[1:]):
                pairs[pair] += n
        if not pairs:
            break
        best = min(pairs, key=lambda p: (-pairs[p], p))
        if pairs[best] < 2:
            break
        merges.append(best)
        words = {_merge_symbols(sym, best): n for sym, n in words.items()}
    return MergeTable(tuple(merges))


def apply_bpe(table: MergeTable, word: str) -> list[str]:
    """Split ``word`` to characters and apply every merge in table order."""
    hit = table._cache.get(word)
    if hit is None:
        symbols = split_word(word)
        for pair in table.merges:
            if len(symbols) == 1:
                break
            symbols = _merge_symbols(symbols, pair)
        hit = table._cache[word] = symbols
    return list(hit)


def tokenize(table: MergeTable, sentence: str) -> list[str]:
    return [tok for word in sentence.split() for tok in apply_bpe(table, word)]


def detokenize(tokens: Iterable[str]) -> str:
    return "".join(t.replace(END, " ") for t in tokens).strip()


def word_counts(sentences: Iterable[str]) -> Counter:
    counts: Counter = Counter()
    for s in sentences:
        counts.update(s.split())
    return counts


class Vocab:
    """Token/id maps with ids 0-3 reserved for PAD, BOS, EOS, UNK."""

    def __init__(self, tokens: Iterable[str]):
        self.itos = list(RESERVED)
        for tok in tokens:
            if tok in RESERVED:
                raise ValueError(f"{tok!r} is a reserved token")
            self.itos.append(tok)
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise ValueError("duplicate token in vocabulary")

    def __len__(self):
        return len(self.itos)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, token: str) -> int:
        return self.stoi.get(token, UNK)

    @classmethod
    def build(cls, table: MergeTable, sentences: Iterable[str]) -> "Vocab":
        counts: Counter = Counter()
        for s in sentences:
            counts.update(tokenize(table, s))
        return cls(sorted(counts, key=lambda t: (-counts[t], t)))

    def save(self, path) -> None:
        Path(path).write_text("\n".join(self.itos[NUM_RESERVED:]) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        return cls([ln for ln in lines if ln])


def encode(vocab: Vocab, table: MergeTable, sentence: str) -> list[int]:
    return [BOS] + [vocab.id(t) for t in tokenize(table, sentence)] + [EOS]


def decode(vocab: Vocab, ids: Iterable[int]) -> str:
    toks = [vocab.itos[i] for i in ids if i not in (PAD, BOS, EOS)]
    return detokenize(toks)
