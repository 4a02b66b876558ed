"""Region-text label assignment.

For an image with annotations G and a region r, the best overlap of r with a
phrase t is the largest IoU between r and any box annotated with t. Phrases on
the image whose best overlap reaches ``eta_pos`` are positive; those strictly
between ``eta_neg`` and ``eta_pos`` are moderate, and every phrase of the
corpus that is text-similar (> ``tau``) to a moderate phrase is uncertain
unless it is positive. Everything else is negative.
"""
from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

import numpy as np

from .geometry import Box, boxes_to_array, iou, iou_matrix
from .textsim import NormalizedPhrase, similarity


class RegionTextLabel(enum.IntEnum):
    NEGATIVE = 0
    POSITIVE = 1
    UNCERTAIN = -1


@dataclass(frozen=True)
class RegionAnnotation:
    region: Box
    phrase: NormalizedPhrase


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    width: int
    height: int
    annotations: tuple[RegionAnnotation, ...]
    proposals: tuple[Box, ...] = ()
    objectness: tuple[float, ...] = ()
    pixel_ref: str = ""

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"{self.image_id}: image size must be positive")
        if self.objectness and len(self.objectness) != len(self.proposals):
            raise ValueError(f"{self.image_id}: objectness/proposal count mismatch")
        for a in self.annotations:
            if not a.region.within(self.width, self.height):
                raise ValueError(f"{self.image_id}: annotation {a.region.to_list()} out of bounds")
        for p in self.proposals:
            if not p.within(self.width, self.height):
                raise ValueError(f"{self.image_id}: proposal {p.to_list()} out of bounds")

    @property
    def phrases(self) -> tuple[NormalizedPhrase, ...]:
        """Deduplicated annotated phrases, in first-seen order."""
        return tuple(dict.fromkeys(a.phrase for a in self.annotations))

    @property
    def annotated_regions(self) -> tuple[Box, ...]:
        return tuple(dict.fromkeys(a.region for a in self.annotations))

    @property
    def regions(self) -> tuple[Box, ...]:
        """All considered regions: annotated boxes then proposals, deduplicated."""
        return tuple(dict.fromkeys(self.annotated_regions + self.proposals))

    def gt_boxes(self, t: NormalizedPhrase) -> tuple[Box, ...]:
        return self._gt_index().get(t, ())

    def gt_array(self, t: NormalizedPhrase) -> np.ndarray:
        return boxes_to_array(self.gt_boxes(t))

    def _gt_index(self) -> dict[NormalizedPhrase, tuple[Box, ...]]:
        idx = self.__dict__.get("_gt")
        if idx is None:
            acc: dict[NormalizedPhrase, list[Box]] = {}
            for a in self.annotations:
                acc.setdefault(a.phrase, []).append(a.region)
            idx = {k: tuple(v) for k, v in acc.items()}
            object.__setattr__(self, "_gt", idx)
        return idx


@dataclass(frozen=True)
class Corpus:
    images: tuple[ImageRecord, ...]
    # phrases never used as level-1/2 detection queries
    stuff_phrases: frozenset[NormalizedPhrase] = frozenset()
    freq: dict[NormalizedPhrase, int] = field(init=False, compare=False, repr=False)

    def __post_init__(self):
        counts: Counter[NormalizedPhrase] = Counter()
        for rec in self.images:
            counts.update(a.phrase for a in rec.annotations)
        object.__setattr__(self, "freq", dict(counts))
        ids = [r.image_id for r in self.images]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate image ids in corpus")

    @property
    def phrases(self) -> tuple[NormalizedPhrase, ...]:
        return tuple(self.freq)

    def __len__(self) -> int:
        return len(self.images)

    def image(self, image_id: str) -> ImageRecord:
        for rec in self.images:
            if rec.image_id == image_id:
                return rec
        raise KeyError(image_id)

    def neighbors(self, t: NormalizedPhrase, tau: float) -> frozenset[NormalizedPhrase]:
        """Phrases of the corpus whose similarity with ``t`` exceeds ``tau``."""
        cache = self.__dict__.setdefault("_nbr", {})
        key = (t, tau)
        hit = cache.get(key)
        if hit is None:
            hit = frozenset(u for u in self.freq if _sim(u.tokens, t.tokens) > tau)
            cache[key] = hit
        return hit


@lru_cache(maxsize=1 << 20)
def _sim_cached(a: tuple[str, ...], b: tuple[str, ...]) -> float:
    return similarity(NormalizedPhrase(a), NormalizedPhrase(b))


def _sim(a: tuple[str, ...], b: tuple[str, ...]) -> float:
    return _sim_cached(a, b) if a <= b else _sim_cached(b, a)


@dataclass(frozen=True)
class LabelConfig:
    eta_pos: float = 0.9
    eta_neg: float = 0.1
    tau: float = 0.3
    prune_ambiguous: bool = True

    def __post_init__(self):
        if not (0 <= self.eta_neg < self.eta_pos <= 1):
            raise ValueError("need 0 <= eta_neg < eta_pos <= 1")
        if not (0 <= self.tau <= 1):
            raise ValueError("need 0 <= tau <= 1")


def best_overlap(rec: ImageRecord, r: Box, t: NormalizedPhrase) -> float:
    return max((iou(g, r) for g in rec.gt_boxes(t)), default=0.0)


def positive_set(rec: ImageRecord, r: Box, cfg: LabelConfig) -> set[NormalizedPhrase]:
    return {t for t in rec.phrases if best_overlap(rec, r, t) >= cfg.eta_pos}


def moderate_set(rec: ImageRecord, r: Box, cfg: LabelConfig) -> set[NormalizedPhrase]:
    return {t for t in rec.phrases if cfg.eta_neg < best_overlap(rec, r, t) < cfg.eta_pos}


def ambiguous_set(corpus: Corpus, rec: ImageRecord, r: Box,
                  cfg: LabelConfig) -> set[NormalizedPhrase]:
    if not cfg.prune_ambiguous:
        return set()
    out: set[NormalizedPhrase] = set()
    for u in moderate_set(rec, r, cfg):
        out |= corpus.neighbors(u, cfg.tau)
    return out - positive_set(rec, r, cfg)


def label(corpus: Corpus, rec: ImageRecord, r: Box, t: NormalizedPhrase,
          cfg: LabelConfig) -> RegionTextLabel:
    if t in positive_set(rec, r, cfg):
        return RegionTextLabel.POSITIVE
    if t in ambiguous_set(corpus, rec, r, cfg):
        return RegionTextLabel.UNCERTAIN
    return RegionTextLabel.NEGATIVE


def label_matrix(rec: ImageRecord, regions: np.ndarray, phrases: Sequence[NormalizedPhrase],
                 cfg: LabelConfig) -> np.ndarray:
    """Labels for every (region, phrase) pair as an int array (R, T).

    Vectorized equivalent of :func:`label`. Column phrases need not occur
    on ``rec``; only text-similarity to the image's own moderate phrases
    matters for them.
    """
    regions = np.asarray(regions, dtype=np.float64).reshape(-1, 4)
    own = rec.phrases
    n_r, n_t = len(regions), len(phrases)
    # best overlap against each of the image's own phrases
    nu_own = np.zeros((n_r, len(own)))
    for k, t in enumerate(own):
        nu_own[:, k] = iou_matrix(regions, rec.gt_array(t)).max(axis=1)
    own_pos = {t: k for k, t in enumerate(own)}
    nu = np.zeros((n_r, n_t))
    for c, t in enumerate(phrases):
        k = own_pos.get(t)
        if k is not None:
            nu[:, c] = nu_own[:, k]
    positive = nu >= cfg.eta_pos
    labels = np.where(positive, int(RegionTextLabel.POSITIVE), int(RegionTextLabel.NEGATIVE))
    if cfg.prune_ambiguous and own:
        moderate = (nu_own > cfg.eta_neg) & (nu_own < cfg.eta_pos)
        similar = np.array([[_sim(u.tokens, t.tokens) > cfg.tau for t in phrases] for u in own],
                           dtype=bool).reshape(len(own), n_t)
        ambiguous = (moderate.astype(np.int64) @ similar.astype(np.int64)) > 0
        labels[ambiguous & ~positive] = int(RegionTextLabel.UNCERTAIN)
    return labels


@dataclass
class EffectivePairs:
    """Non-uncertain region-text pairs split by label and phrase origin."""

    pos: list[tuple[Box, NormalizedPhrase]]
    neg: list[tuple[Box, NormalizedPhrase]]
    rest: list[tuple[Box, NormalizedPhrase]]


def effective_pairs(corpus: Corpus, rec: ImageRecord, cfg: LabelConfig,
                    rest_phrases: Iterable[NormalizedPhrase] = (),
                    regions: Sequence[Box] | None = None) -> EffectivePairs:
    own = rec.phrases
    own_set = set(own)
    rest = [t for t in dict.fromkeys(rest_phrases)]
    if any(t in own_set for t in rest):
        raise ValueError("rest phrases must not be annotated on the image")
    regions = rec.regions if regions is None else tuple(regions)
    cols = list(own) + rest
    labels = label_matrix(rec, boxes_to_array(regions), cols, cfg) if regions else np.zeros((0, len(cols)))
    out = EffectivePairs([], [], [])
    for i, r in enumerate(regions):
        for c, t in enumerate(cols):
            y = labels[i, c]
            if y == RegionTextLabel.POSITIVE:
                out.pos.append((r, t))
            elif y == RegionTextLabel.NEGATIVE:
                (out.neg if c < len(own) else out.rest).append((r, t))
    return out
