"""Axis-aligned box arithmetic.

Boxes are half-open continuous regions ``[x0, x1) x [y0, y1)`` in pixel
coordinates. Areas use raw coordinate differences (no ``+1`` convention),
which keeps encoding and decoding exactly invertible.

Scalar helpers operate on :class:`Box` values; the ``*_array`` helpers work on
``(N, 4)`` arrays in ``(x0, y0, x1, y1)`` order and are what the heavier
modules use.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Box:
    x0: float
    y0: float
    x1: float
    y1: float

    def __post_init__(self):
        coords = (self.x0, self.y0, self.x1, self.y1)
        if not all(math.isfinite(c) for c in coords):
            raise ValueError(f"box coordinates must be finite, got {coords}")
        if self.x1 < self.x0 or self.y1 < self.y0:
            raise ValueError(f"box corners out of order: {coords}")

    @property
    def width(self) -> float:
        return self.x1 - self.x0

    @property
    def height(self) -> float:
        return self.y1 - self.y0

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x0, self.y0, self.x1, self.y1)

    def contains(self, px: float, py: float) -> bool:
        """Inclusive containment test (border points count as inside)."""
        return self.x0 <= px <= self.x1 and self.y0 <= py <= self.y1

    def scaled(self, factor: float) -> "Box":
        return Box(self.x0 * factor, self.y0 * factor, self.x1 * factor, self.y1 * factor)

    def clipped(self, width: float, height: float) -> "Box":
        x0 = min(max(self.x0, 0.0), width)
        y0 = min(max(self.y0, 0.0), height)
        x1 = min(max(self.x1, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        return Box(x0, y0, x1, y1)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        return cls(x, y, x + w, y + h)

    def to_xywh(self) -> list[float]:
        return [self.x0, self.y0, self.width, self.height]


@dataclass(frozen=True)
class LabeledBox:
    """A ground-truth box with its category and position in the source file."""

    box: Box
    class_id: int
    annotation_index: int = 0
    is_crowd: bool = False

    def __post_init__(self):
        if int(self.class_id) < 1:
            raise ValueError(f"class_id must be >= 1 (0 is background), got {self.class_id}")


def area(b: Box) -> float:
    return (b.x1 - b.x0) * (b.y1 - b.y0)


def iou(a: Box, b: Box) -> float:
    """Intersection over union of two boxes; 0 when the union is empty."""
    iw = min(a.x1, b.x1) - max(a.x0, b.x0)
    ih = min(a.y1, b.y1) - max(a.y0, b.y0)
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = area(a) + area(b) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def enclosing_box(a: Box, b: Box) -> Box:
    return Box(min(a.x0, b.x0), min(a.y0, b.y0), max(a.x1, b.x1), max(a.y1, b.y1))


def as_box_array(boxes) -> np.ndarray:
    """Coerce a sequence of :class:`Box` / 4-sequences into an ``(N, 4)`` float array."""
    if isinstance(boxes, np.ndarray):
        arr = boxes.astype(np.float64, copy=False)
    else:
        rows = [b.as_tuple() if isinstance(b, Box) else tuple(b) for b in boxes]
        arr = np.asarray(rows, dtype=np.float64)
    if arr.size == 0:
        return np.zeros((0, 4), dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"expected boxes of shape (N, 4), got {arr.shape}")
    return arr


def area_array(boxes: np.ndarray) -> np.ndarray:
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def pairwise_iou(boxes1: np.ndarray, boxes2: np.ndarray) -> np.ndarray:
    """``(N, M)`` IoU matrix between two box arrays."""
    boxes1 = as_box_array(boxes1)
    boxes2 = as_box_array(boxes2)
    lt = np.maximum(boxes1[:, None, :2], boxes2[None, :, :2])
    rb = np.minimum(boxes1[:, None, 2:], boxes2[None, :, 2:])
    wh = np.clip(rb - lt, 0.0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area_array(boxes1)[:, None] + area_array(boxes2)[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def clip_array(boxes: np.ndarray, width: float, height: float) -> np.ndarray:
    out = boxes.copy()
    out[:, 0::2] = np.clip(out[:, 0::2], 0.0, width)
    out[:, 1::2] = np.clip(out[:, 1::2], 0.0, height)
    return out
