"""Axis-aligned box arithmetic: area, IoU, and greedy non-maximum suppression.

Boxes live in normalized scene coordinates, so every coordinate is in
[0, 1] and all overlap logic is resolution independent.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box (x1, y1, x2, y2) with x1 < x2 and y1 < y2.

    Degenerate (zero-area) boxes are rejected at construction: IoU is
    undefined for them and nothing in the pipeline produces them.
    """

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        if not (0.0 <= self.x1 < self.x2 <= 1.0 and 0.0 <= self.y1 < self.y2 <= 1.0):
            raise ValueError(
                f"invalid box ({self.x1}, {self.y1}, {self.x2}, {self.y2}): "
                "need 0 <= x1 < x2 <= 1 and 0 <= y1 < y2 <= 1"
            )

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def contains_point(self, x: float, y: float) -> bool:
        """Closed-box membership test (boundary counts as inside)."""
        return self.x1 <= x <= self.x2 and self.y1 <= y <= self.y2

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)


@dataclass(frozen=True)
class ScoredBoxSet:
    """Parallel lists of boxes and confidence scores, the NMS input."""

    boxes: tuple[BBox, ...]
    scores: tuple[float, ...]

    def __post_init__(self):
        if len(self.boxes) != len(self.scores):
            raise ValueError(
                f"{len(self.boxes)} boxes but {len(self.scores)} scores"
            )

    @classmethod
    def of(cls, boxes: Sequence[BBox], scores: Sequence[float]) -> "ScoredBoxSet":
        return cls(tuple(boxes), tuple(float(s) for s in scores))

    def __len__(self) -> int:
        return len(self.boxes)


def intersection_area(a: BBox, b: BBox) -> float:
    w = min(a.x2, b.x2) - max(a.x1, b.x1)
    h = min(a.y2, b.y2) - max(a.y1, b.y1)
    if w <= 0.0 or h <= 0.0:
        return 0.0
    return w * h


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union of two boxes, in [0, 1]."""
    inter = intersection_area(a, b)
    if inter == 0.0:
        return 0.0
    union = a.area + b.area - inter
    return inter / union


def pairwise_iou(
    rows: Sequence[BBox], cols: Sequence[BBox] | None = None
) -> np.ndarray:
    """IoU matrix between two box sequences (square when ``cols`` is None).

    Entry [i, j] is bit-identical to ``iou(rows[i], cols[j])``: the batched
    arithmetic applies the same operations in the same order, so callers may
    mix the scalar and batched forms freely.
    """
    a = np.array([b.as_tuple() for b in rows], dtype=float).reshape(-1, 4)
    b = a if cols is None else np.array(
        [c.as_tuple() for c in cols], dtype=float
    ).reshape(-1, 4)
    w = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    h = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.where((w <= 0.0) | (h <= 0.0), 0.0, w * h)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(inter == 0.0, 0.0, inter / union)


def nms(boxset: ScoredBoxSet, overlap_threshold: float, max_keep: int) -> list[int]:
    """Greedy suppression in descending score order.

    A box is kept iff its IoU with every previously kept box is at most
    ``overlap_threshold``.  Returns at most ``max_keep`` indices into the
    input set, sorted by descending score; equal scores keep the lower
    original index first.
    """
    if not (0.0 <= overlap_threshold <= 1.0):
        raise ValueError(f"overlap_threshold {overlap_threshold} outside [0, 1]")
    if max_keep < 1:
        raise ValueError(f"max_keep must be >= 1, got {max_keep}")

    order = sorted(range(len(boxset)), key=lambda i: (-boxset.scores[i], i))
    kept: list[int] = []
    for i in order:
        if len(kept) >= max_keep:
            break
        if all(iou(boxset.boxes[i], boxset.boxes[j]) <= overlap_threshold for j in kept):
            kept.append(i)
    return kept
