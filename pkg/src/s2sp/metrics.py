"""Corpus BLEU (multi-bleu semantics, single reference) and ROUGE-1/2/L."""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

from .tensor import ContractError

Tokens = Sequence[str]


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _split(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def bleu_corpus(hyps: Sequence[Tokens], refs: Sequence[Tokens], max_n: int = 4) -> float:
    """Case-sensitive corpus BLEU in [0, 100], no smoothing.

    Clipped n-gram matches and hypothesis n-gram totals are summed over the
    corpus before taking precisions; any zero precision gives 0.
    """
    if len(hyps) != len(refs):
        raise ContractError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if not hyps:
        raise ContractError("BLEU of an empty corpus")
    matches = [0] * max_n
    totals = [0] * max_n
    c = r = 0
    for hyp, ref in zip(hyps, refs):
        hyp, ref = _split(hyp), _split(ref)
        c += len(hyp)
        r += len(ref)
        for n in range(1, max_n + 1):
            h, g = ngrams(hyp, n), ngrams(ref, n)
            matches[n - 1] += sum(min(k, g[ng]) for ng, k in h.items())
            totals[n - 1] += max(len(hyp) - n + 1, 0)
    if c == 0 or min(matches) == 0:
        return 0.0
    log_p = sum(math.log(m / t) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return 100.0 * bp * math.exp(log_p)


def _prf(overlap: int, n_hyp: int, n_ref: int) -> tuple[float, float, float]:
    p = overlap / n_hyp if n_hyp else 0.0
    r = overlap / n_ref if n_ref else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def _mean3(rows) -> tuple[float, float, float]:
    rows = list(rows)
    if not rows:
        raise ContractError("ROUGE of an empty corpus")
    k = len(rows)
    return tuple(sum(r[i] for r in rows) / k for i in range(3))  # type: ignore[return-value]


def _pairs(hyps, refs):
    # A bare pair of strings scores a single example.
    if isinstance(hyps, str) and isinstance(refs, str):
        hyps, refs = [hyps], [refs]
    if len(hyps) != len(refs):
        raise ContractError(f"{len(hyps)} hypotheses but {len(refs)} references")
    for hyp, ref in zip(hyps, refs):
        hyp, ref = _split(hyp), _split(ref)
        if not ref:
            raise ContractError("ROUGE needs a nonempty reference")
        yield hyp, ref


def rouge_n(hyps, refs, n: int = 1) -> tuple[float, float, float]:
    """Mean per-example (precision, recall, F1) of clipped n-gram overlap."""
    if n not in (1, 2):
        raise ValueError("ROUGE-N supports n = 1 or 2")

    def one(hyp, ref):
        h, g = ngrams(hyp, n), ngrams(ref, n)
        return _prf(sum((h & g).values()), sum(h.values()), sum(g.values()))

    return _mean3(one(h, r) for h, r in _pairs(hyps, refs))


def lcs_length(a: Tokens, b: Tokens) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(hyps, refs) -> tuple[float, float, float]:
    """Mean per-example LCS (precision, recall, F1) with beta = 1."""
    return _mean3(_prf(lcs_length(h, r), len(h), len(r)) for h, r in _pairs(hyps, refs))
