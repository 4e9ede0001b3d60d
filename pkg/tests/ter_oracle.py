"""Exhaustive TER minimum for short sentences, vectorized over references.

Independent of the package: every arrangement of the candidate reachable by
block moves is enumerated with its fewest-moves count, then the cheapest
``moves + levenshtein(arrangement, reference)`` is taken.
"""

from __future__ import annotations

import itertools
from collections import deque

import numpy as np


def _block_moves(seq: tuple):
    n = len(seq)
    for i in range(n):
        for j in range(i + 1, n + 1):
            block, rest = seq[i:j], seq[:i] + seq[j:]
            for k in range(len(rest) + 1):
                if k != i:
                    yield rest[:k] + block + rest[k:]


def permutation_move_counts(n: int) -> dict[tuple, int]:
    start = tuple(range(n))
    dist = {start: 0}
    queue = deque([start])
    while queue:
        p = queue.popleft()
        for q in _block_moves(p):
            if q not in dist:
                dist[q] = dist[p] + 1
                queue.append(q)
    return dist


def arrangements(cand: tuple, moves: dict[tuple, int]) -> tuple[np.ndarray, np.ndarray]:
    best: dict[tuple, int] = {}
    for perm, k in moves.items():
        arr = tuple(cand[i] for i in perm)
        if k < best.get(arr, 1 << 30):
            best[arr] = k
    keys = sorted(best)
    return np.array(keys, dtype=np.int64).reshape(len(keys), len(cand)), np.array([best[a] for a in keys])


def levenshtein_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Edit distance between every row of ``a`` [K, n] and every row of ``b`` [M, m]."""
    k, n = a.shape
    m_rows, m = b.shape
    prev = np.broadcast_to(np.arange(m + 1), (k, m_rows, m + 1)).copy()
    for i in range(1, n + 1):
        cur = np.empty_like(prev)
        cur[..., 0] = i
        for j in range(1, m + 1):
            sub = prev[..., j - 1] + (a[:, i - 1][:, None] != b[:, j - 1][None, :])
            cur[..., j] = np.minimum(np.minimum(prev[..., j] + 1, cur[..., j - 1] + 1), sub)
        prev = cur
    return prev[..., m]


def canonical_candidates(max_len: int, alphabet: int) -> list[tuple]:
    """One sequence per relabeling class: symbols numbered by first appearance."""
    out = []
    for n in range(max_len + 1):
        for seq in itertools.product(range(alphabet), repeat=n):
            seen = -1
            ok = True
            for x in seq:
                if x > seen + 1:
                    ok = False
                    break
                seen = max(seen, x)
            if ok:
                out.append(seq)
    return out


def minimum_ter_table(max_len: int = 6, alphabet: int = 3):
    """Yield ``(candidate, references [M, m], minimum edits+moves [M])`` blocks."""
    moves = {n: permutation_move_counts(n) for n in range(max_len + 1)}
    refs = {
        m: np.array(list(itertools.product(range(alphabet), repeat=m)), dtype=np.int64)
        for m in range(1, max_len + 1)
    }
    for cand in canonical_candidates(max_len, alphabet):
        arr, k = arrangements(cand, moves[len(cand)])
        for m, r in refs.items():
            if len(cand) == 0:
                yield cand, r, np.full(len(r), m)
                continue
            yield cand, r, (k[:, None] + levenshtein_matrix(arr, r)).min(axis=0)
