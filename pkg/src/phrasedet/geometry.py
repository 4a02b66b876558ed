"""Axis-aligned boxes, IoU and greedy non-maximum suppression.

Boxes are ``(x1, y1, x2, y2)`` in continuous pixel coordinates with the
origin at the top-left corner. Area is the real product of the side lengths.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class InvalidBox(ValueError):
    pass


@dataclass(frozen=True, slots=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidBox(f"non-finite box coordinates {vals}")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise InvalidBox(f"degenerate box {vals}")

    @classmethod
    def from_list(cls, xs: Sequence[float]) -> "Box":
        if len(xs) != 4:
            raise InvalidBox(f"box needs 4 coordinates, got {len(xs)}")
        return cls(*(float(v) for v in xs))

    def to_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]

    def as_array(self) -> np.ndarray:
        return np.array(self.to_list(), dtype=np.float64)

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def within(self, width: float, height: float) -> bool:
        return self.x1 >= 0 and self.y1 >= 0 and self.x2 <= width and self.y2 <= height


@dataclass(frozen=True, slots=True)
class ScoredBox:
    box: Box
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError(f"non-finite score {self.score}")


def area(b: Box) -> float:
    return (b.x2 - b.x1) * (b.y2 - b.y1)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    if a == b:
        return 1.0
    return inter / (area(a) + area(b) - inter)


def boxes_to_array(boxes: Iterable[Box]) -> np.ndarray:
    arr = np.array([b.to_list() for b in boxes], dtype=np.float64)
    return arr.reshape(-1, 4)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between rows of ``a`` (N, 4) and ``b`` (M, 4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    out = inter / union
    # identical rows must come out as exactly 1
    same = np.all(a[:, None, :] == b[None, :, :], axis=2)
    out[same] = 1.0
    return out


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_threshold: float,
                max_keep: int | None = None) -> list[int]:
    """Greedy NMS over arrays; returns kept indices in descending score order.

    Ties in score keep input order.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = len(scores)
    if n == 0:
        return []
    order = np.argsort(-scores, kind="stable")
    overlaps = iou_matrix(boxes, boxes)
    kept: list[int] = []
    suppressed = np.zeros(n, dtype=bool)
    for idx in order:
        if suppressed[idx]:
            continue
        kept.append(int(idx))
        if max_keep is not None and len(kept) >= max_keep:
            break
        suppressed |= overlaps[idx] > iou_threshold
    return kept


def nms(candidates: Sequence[ScoredBox], iou_threshold: float,
        max_keep: int | None = None) -> list[ScoredBox]:
    if max_keep is not None and max_keep < 1:
        raise ValueError("max_keep must be positive or None")
    if not candidates:
        return []
    arr = boxes_to_array(c.box for c in candidates)
    scores = np.array([c.score for c in candidates])
    return [candidates[i] for i in nms_indices(arr, scores, iou_threshold, max_keep)]
