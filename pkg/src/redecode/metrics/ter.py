"""Translation edit rate: edit distance plus block shifts."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

from ..tensor import ContractError

Tokens = Sequence[str]
SEARCH_BUDGET = 4000


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Word-level Levenshtein distance with unit costs."""
    return _edit_distance(tuple(a), tuple(b))


@lru_cache(maxsize=1 << 16)
def _edit_distance(a: tuple, b: tuple) -> int:
    # bit-parallel Levenshtein: one machine word per reference column set
    m = len(b)
    if m == 0:
        return len(a)
    peq: dict = {}
    for i, tok in enumerate(b):
        peq[tok] = peq.get(tok, 0) | (1 << i)
    mask = (1 << m) - 1
    high = 1 << (m - 1)
    pv, mv, score = mask, 0, m
    for tok in a:
        eq = peq.get(tok, 0)
        xv = eq | mv
        xh = ((((eq & pv) + pv) & mask) ^ pv) | eq
        ph = (mv | ~(xh | pv)) & mask
        mh = pv & xh
        if ph & high:
            score += 1
        elif mh & high:
            score -= 1
        ph = ((ph << 1) | 1) & mask
        mh = (mh << 1) & mask
        pv = (mh | ~(xv | ph)) & mask
        mv = ph & xv
    return score


def apply_shift(seq: Sequence, start: int, length: int, dest: int) -> list:
    """Move ``seq[start:start+length]`` so it begins at ``dest`` in the remaining sequence."""
    block = list(seq[start : start + length])
    rest = list(seq[:start]) + list(seq[start + length :])
    return rest[:dest] + block + rest[dest:]


def _shifts(n: int):
    for start in range(n):
        for length in range(1, n - start + 1):
            for dest in range(n - length + 1):
                if dest != start:
                    yield start, length, dest


@dataclass
class TerStats:
    edits: int
    shifts: int
    ref_len: int

    @property
    def total(self) -> int:
        return self.edits + self.shifts


def bag_distance(a: Sequence, b: Sequence) -> int:
    """Lower bound on edit distance that no block shift can change."""
    ca, cb = Counter(a), Counter(b)
    return max(sum((ca - cb).values()), sum((cb - ca).values()))


@lru_cache(maxsize=4096)
def _neighbours(seq: tuple) -> tuple[tuple, ...]:
    """Distinct sequences one block shift away, in scan order."""
    out = {}
    for start, length, dest in _shifts(len(seq)):
        out.setdefault(tuple(apply_shift(seq, start, length, dest)), None)
    out.pop(seq, None)
    return tuple(out)


def greedy_shifts(candidate: Sequence, reference: Sequence) -> tuple[list, int, int]:
    """Repeatedly apply the shift that most reduces edit distance (ties: scan order)."""
    current = tuple(candidate)
    reference = tuple(reference)
    dist = _edit_distance(current, reference)
    shifts = 0
    while dist > 0:
        best_gain, best_seq = 0, None
        for moved in _neighbours(current):
            gain = dist - _edit_distance(moved, reference)
            if gain > best_gain:
                best_gain, best_seq = gain, moved
        if best_seq is None:
            break
        current = best_seq
        dist -= best_gain
        shifts += 1
    return list(current), dist, shifts


def ter_stats(candidate: Tokens, reference: Tokens, budget: int = SEARCH_BUDGET) -> TerStats:
    """Minimum edits-plus-shifts found by greedy search, then refined.

    The greedy pass gives an upper bound. A breadth-first search over shift
    sequences then looks for a cheaper total, pruned by ``bag_distance``
    (invariant under shifts) and capped at ``budget`` edit-distance
    evaluations. Short sentences are searched exhaustively, so the result
    is the true minimum there; long ones fall back to the greedy bound.
    """
    if not reference:
        raise ContractError("TER needs a non-empty reference")
    cand = tuple(candidate)
    ref = tuple(reference)
    edits = edit_distance(cand, ref)
    floor = bag_distance(cand, ref)
    best = TerStats(edits, 0, len(ref))
    if edits <= floor + 1:
        return best
    _, g_edits, g_shifts = greedy_shifts(cand, ref)
    if g_edits + g_shifts < best.total:
        best = TerStats(g_edits, g_shifts, len(ref))
    visited = {cand}
    frontier = [cand]
    spent = 0
    k = 0
    while frontier and k + 1 + floor < best.total and spent < budget:
        k += 1
        nxt = []
        for seq in frontier:
            for moved in _neighbours(seq):
                if moved in visited:
                    continue
                visited.add(moved)
                nxt.append(moved)
                d = _edit_distance(moved, ref)
                spent += 1
                if k + d < best.total:
                    best = TerStats(d, k, len(ref))
                if spent >= budget:
                    break
            if spent >= budget:
                break
        frontier = nxt
    return best


def ter_score(candidate: Tokens, reference: Tokens) -> float:
    """Edits plus shifts over reference length (0 is a perfect match)."""
    s = ter_stats(candidate, reference)
    return s.total / s.ref_len


def ter_corpus(candidates: Sequence[Tokens], references: Sequence[Tokens]) -> float:
    """Pooled TER in percent: total edits over total reference words.

    An empty reference adds one edit per candidate word and no reference
    words. With no reference words at all the score is 0 when nothing was
    emitted either, else 100.
    """
    if len(candidates) != len(references):
        raise ContractError(f"{len(candidates)} candidates vs {len(references)} references")
    if not candidates:
        raise ContractError("TER of an empty corpus")
    edits = words = 0
    for c, r in zip(candidates, references):
        if not r:
            edits += len(c)
            continue
        s = ter_stats(c, r)
        edits += s.total
        words += s.ref_len
    if words == 0:
        return 100.0 if edits else 0.0
    return 100.0 * edits / words
