"""Corpus BLEU against a single reference per segment."""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from ..tensor import ContractError

Tokens = Sequence[str]


def ngrams(tokens: Tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


@dataclass
class BleuStats:
    matches: list[int]
    totals: list[int]
    cand_len: int
    ref_len: int

    def __add__(self, other: BleuStats) -> BleuStats:
        return BleuStats(
            [a + b for a, b in zip(self.matches, other.matches)],
            [a + b for a, b in zip(self.totals, other.totals)],
            self.cand_len + other.cand_len,
            self.ref_len + other.ref_len,
        )


def segment_stats(candidate: Tokens, reference: Tokens, max_order: int = 4) -> BleuStats:
    matches, totals = [], []
    for n in range(1, max_order + 1):
        cand = ngrams(candidate, n)
        ref = ngrams(reference, n)
        matches.append(sum(min(c, ref[g]) for g, c in cand.items()))
        totals.append(max(len(candidate) - n + 1, 0))
    return BleuStats(matches, totals, len(candidate), len(reference))


def bleu_from_stats(stats: BleuStats, smooth: bool = True) -> float:
    """BLEU in [0, 100].

    With ``smooth``, orders n >= 2 use (matches + 1) / (total + 1).
    """
    log_sum = 0.0
    order = len(stats.matches)
    for n, (m, t) in enumerate(zip(stats.matches, stats.totals), start=1):
        if smooth and n >= 2:
            m, t = m + 1, t + 1
        if m == 0 or t == 0:
            return 0.0
        log_sum += math.log(m / t)
    c, r = stats.cand_len, stats.ref_len
    if c == 0:
        return 0.0
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return 100.0 * bp * math.exp(log_sum / order)


def bleu_corpus(candidates: Sequence[Tokens], references: Sequence[Tokens], smooth: bool = True, max_order: int = 4) -> float:
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ContractError("BLEU of an empty corpus")
    total = BleuStats([0] * max_order, [0] * max_order, 0, 0)
    for c, r in zip(candidates, references):
        total = total + segment_stats(c, r, max_order)
    return bleu_from_stats(total, smooth)


def bleu_sentence(candidate: Tokens, reference: Tokens, smooth: bool = True) -> float:
    return bleu_from_stats(segment_stats(candidate, reference), smooth)
