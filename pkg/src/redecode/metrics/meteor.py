"""METEOR with exact, Porter-stem and optional synonym matching stages.

Scoring uses the classic constants: ``F = 10PR / (R + 9P)`` and
``penalty = 0.5 * (chunks / matches) ** 3``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

from ..tensor import ContractError
from .stem import porter_stem

Tokens = Sequence[str]
ALPHA, BETA, GAMMA = 0.9, 3.0, 0.5
SEARCH_BUDGET = 20_000


@dataclass(frozen=True)
class Alignment:
    pairs: tuple[tuple[int, int], ...]  # (candidate index, reference index), sorted by candidate

    @property
    def matches(self) -> int:
        return len(self.pairs)

    @property
    def chunks(self) -> int:
        return count_chunks(self.pairs)


def count_chunks(pairs: Sequence[tuple[int, int]]) -> int:
    """Runs of matches contiguous and in the same order in both sentences."""
    chunks = 0
    prev = None
    for i, j in sorted(pairs):
        if prev is None or i != prev[0] + 1 or j != prev[1] + 1:
            chunks += 1
        prev = (i, j)
    return chunks


class SynonymTable:
    """Exact-lookup synonym sets. Empty by default."""

    def __init__(self, groups: Sequence[Sequence[str]] = ()):
        self._group: dict[str, int] = {}
        for gid, words in enumerate(groups):
            for w in words:
                self._group[w.lower()] = gid

    def key(self, word: str):
        gid = self._group.get(word.lower())
        return None if gid is None else ("syn", gid)

    def __bool__(self) -> bool:
        return bool(self._group)


def _stages(synonyms: SynonymTable | None) -> list[Callable[[str], object]]:
    stages: list[Callable[[str], object]] = [lambda w: w.lower(), porter_stem]
    if synonyms:
        stages.append(synonyms.key)
    return stages


def _best_stage_alignment(
    cand: Tokens,
    ref: Tokens,
    key: Callable[[str], object],
    fixed: list[tuple[int, int]],
) -> list[tuple[int, int]]:
    """Among unaligned words, pick a maximum matching that minimizes total chunks.

    Exhaustive branch-and-bound over candidate positions. Heavily repeated
    words can blow up the search, so past ``SEARCH_BUDGET`` nodes the best
    alignment found so far is kept (the first branch tried is the in-order
    greedy alignment, so one always exists).
    """
    used_c = {i for i, _ in fixed}
    used_r = {j for _, j in fixed}
    ref_keys: dict[object, list[int]] = {}
    for j, w in enumerate(ref):
        if j in used_r:
            continue
        k = key(w)
        if k is not None:
            ref_keys.setdefault(k, []).append(j)
    options = []
    for i, w in enumerate(cand):
        if i in used_c:
            continue
        k = key(w)
        if k is not None and k in ref_keys:
            options.append((i, ref_keys[k]))
    if not options:
        return []

    # suffix upper bound on additional matches
    bound = [0] * (len(options) + 1)
    for idx in range(len(options) - 1, -1, -1):
        bound[idx] = bound[idx + 1] + 1

    best: list = [(-1, 0), []]  # (matches, -chunks), chosen
    nodes = [0]

    def score(chosen):
        return (len(chosen), -count_chunks(fixed + chosen))

    def search(idx: int, taken: frozenset, chosen: list):
        nodes[0] += 1
        if len(chosen) + bound[idx] < best[0][0] or (nodes[0] > SEARCH_BUDGET and best[1]):
            return
        if idx == len(options):
            s = score(chosen)
            if s > best[0]:
                best[0], best[1] = s, list(chosen)
            return
        i, refs = options[idx]
        for j in refs:
            if j not in taken:
                chosen.append((i, j))
                search(idx + 1, taken | {j}, chosen)
                chosen.pop()
        search(idx + 1, taken, chosen)

    search(0, frozenset(), [])
    return best[1]


def align(candidate: Tokens, reference: Tokens, synonyms: SynonymTable | None = None) -> Alignment:
    pairs: list[tuple[int, int]] = []
    for key in _stages(synonyms):
        pairs = pairs + _best_stage_alignment(candidate, reference, key, pairs)
    return Alignment(tuple(sorted(pairs)))


@dataclass
class MeteorStats:
    matches: int
    chunks: int
    cand_len: int
    ref_len: int


def meteor_stats(candidate: Tokens, reference: Tokens, synonyms: SynonymTable | None = None) -> MeteorStats:
    a = align(candidate, reference, synonyms)
    return MeteorStats(a.matches, a.chunks, len(candidate), len(reference))


def meteor_from_stats(matches: int, chunks: int, cand_len: int, ref_len: int) -> float:
    if matches == 0:
        return 0.0
    p = matches / cand_len
    r = matches / ref_len
    fmean = p * r / (ALPHA * p + (1 - ALPHA) * r)
    penalty = GAMMA * (chunks / matches) ** BETA
    return fmean * (1.0 - penalty)


def meteor_score(candidate: Tokens, reference: Tokens, synonyms: SynonymTable | None = None) -> float:
    """Sentence METEOR in [0, 1]."""
    s = meteor_stats(candidate, reference, synonyms)
    return meteor_from_stats(s.matches, s.chunks, s.cand_len, s.ref_len)


def meteor_corpus(
    candidates: Sequence[Tokens],
    references: Sequence[Tokens],
    synonyms: SynonymTable | None = None,
) -> float:
    """Corpus METEOR in [0, 100] from pooled match, chunk and length counts."""
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ContractError("METEOR of an empty corpus")
    m = ch = cl = rl = 0
    for c, r in zip(candidates, references):
        s = meteor_stats(c, r, synonyms)
        m, ch, cl, rl = m + s.matches, ch + s.chunks, cl + s.cand_len, rl + s.ref_len
    return 100.0 * meteor_from_stats(m, ch, cl, rl)


def synonyms_from_mapping(mapping: Mapping[str, Sequence[str]]) -> SynonymTable:
    return SynonymTable([[k, *v] for k, v in mapping.items()])
