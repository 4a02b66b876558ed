"""Phrase normalization and an exact-match METEOR similarity.

Only the exact unigram matching stage of METEOR is used: no stemming and no
synonym tables. Identical token sequences short-circuit to 1.0.
"""
from __future__ import annotations

import string
from collections import Counter
from dataclasses import dataclass, field
from typing import Protocol

ALPHA = 0.9
GAMMA = 0.5
BETA = 3.0

_STRIP = string.punctuation + "¢£€§°\u2013\u2014"


class EmptyPhrase(ValueError):
    pass


@dataclass(frozen=True)
class NormalizedPhrase:
    """A phrase keyed by its token sequence; ``raw`` is kept for display only."""

    tokens: tuple[str, ...]
    raw: str = field(default="", compare=False)

    @property
    def text(self) -> str:
        return " ".join(self.tokens)

    def __str__(self) -> str:
        return self.text

    def __len__(self) -> int:
        return len(self.tokens)


def normalize(raw: str) -> NormalizedPhrase:
    tokens = []
    for tok in raw.lower().split():
        tok = tok.strip(_STRIP)
        if tok:
            tokens.append(tok)
    if not tokens:
        raise EmptyPhrase(f"phrase {raw!r} is empty after normalization")
    return NormalizedPhrase(tuple(tokens), raw)


def _count_chunks(pairs: list[tuple[int, int]]) -> int:
    # pairs sorted by the first index
    chunks = 1
    for (i0, j0), (i1, j1) in zip(pairs, pairs[1:]):
        if not (i1 == i0 + 1 and j1 == j0 + 1):
            chunks += 1
    return chunks


def align(a: tuple[str, ...], b: tuple[str, ...]) -> tuple[int, int]:
    """Return ``(matches, chunks)`` for the best one-to-one exact alignment.

    The alignment maximizes the match count and, among maximal alignments,
    minimizes the number of contiguous chunks.
    """
    m = sum((Counter(a) & Counter(b)).values())
    if m == 0:
        return 0, 0
    positions: dict[str, list[int]] = {}
    for j, tok in enumerate(b):
        positions.setdefault(tok, []).append(j)
    if all(len(positions.get(tok, ())) <= 1 for tok in a) and len(set(a)) == len(a):
        pairs = [(i, positions[tok][0]) for i, tok in enumerate(a) if tok in positions]
        return m, _count_chunks(pairs)

    # duplicates present: search over maximal alignments
    best = [len(a) + 1]
    used = [False] * len(b)
    pairs: list[tuple[int, int]] = []
    remaining = Counter(a) & Counter(b)

    def search(i: int, got: int) -> None:
        if got == m:
            best[0] = min(best[0], _count_chunks(pairs))
            return
        if i == len(a):
            return
        tok = a[i]
        if remaining[tok] > 0:
            remaining[tok] -= 1
            for j in positions.get(tok, ()):
                if not used[j]:
                    used[j] = True
                    pairs.append((i, j))
                    search(i + 1, got + 1)
                    pairs.pop()
                    used[j] = False
            remaining[tok] += 1
        # skipping a[i] is allowed only while enough matches remain reachable
        if sum(remaining.values()) >= m - got and _reachable(i + 1, m - got):
            search(i + 1, got)

    def _reachable(start: int, need: int) -> bool:
        avail = Counter(a[start:])
        return sum(min(avail[t], c) for t, c in remaining.items()) >= need

    search(0, 0)
    return m, best[0]


def directed_score(m: int, chunks: int, len_cand: int, len_ref: int) -> float:
    if m == 0:
        return 0.0
    p = m / len_cand
    r = m / len_ref
    f = p * r / (ALPHA * p + (1 - ALPHA) * r)
    penalty = GAMMA * (chunks / m) ** BETA
    return f * (1 - penalty)


def similarity(a: NormalizedPhrase, b: NormalizedPhrase) -> float:
    if a.tokens == b.tokens:
        return 1.0
    m, chunks = align(a.tokens, b.tokens)
    if m == 0:
        return 0.0
    # chunk count is symmetric in the two phrases
    return max(directed_score(m, chunks, len(a), len(b)),
               directed_score(m, chunks, len(b), len(a)))


def passes_threshold(a: NormalizedPhrase, b: NormalizedPhrase, tau: float) -> bool:
    return similarity(a, b) > tau


class SimilarityMeasure(Protocol):
    def __call__(self, a: NormalizedPhrase, b: NormalizedPhrase) -> float: ...
