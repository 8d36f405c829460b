"""Per-location training targets across pyramid levels.

Every feature-map location ``(x, y)`` at stride ``s`` maps to the image point
``(s // 2 + x * s, s // 2 + y * s)``. A location is positive for a ground-truth
box when that point lies inside the box (border inclusive) and the largest of
its four side distances falls in the level's ``(lower, upper]`` range. When
several boxes qualify, the one with the smallest area wins, ties going to the
lower annotation index.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .config import FpnConfig
from .geometry import Box, LabeledBox
from .parallel import parallel_map

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LocationTarget:
    level_index: int
    grid_x: int
    grid_y: int
    image_x: int
    image_y: int
    class_label: int
    regression: Optional[tuple[float, float, float, float]]
    centerness: Optional[float]
    source_annotation: Optional[int]
    is_ambiguous: bool
    ambiguous_cross_class: bool


@dataclass(frozen=True)
class GridShape:
    width: int
    height: int


def grid_shape(image_width: int, image_height: int, stride: int) -> GridShape:
    if image_width < 1 or image_height < 1:
        raise ValueError("image dimensions must be >= 1")
    return GridShape(math.ceil(image_width / stride), math.ceil(image_height / stride))


def map_location(stride: int, grid_x: int, grid_y: int) -> tuple[int, int]:
    half = stride // 2
    return half + grid_x * stride, half + grid_y * stride


def encode_targets(px: float, py: float, b: Box) -> tuple[float, float, float, float]:
    """Distances from ``(px, py)`` to the left, top, right and bottom sides of ``b``."""
    if not b.contains(px, py):
        raise ValueError(f"point ({px}, {py}) lies outside {b}")
    return (px - b.x0, py - b.y0, b.x1 - px, b.y1 - py)


def centerness_target(l: float, t: float, r: float, b: float) -> float:
    if min(l, t, r, b) < 0:
        raise ValueError("regression distances must be non-negative")
    lr = max(l, r)
    tb = max(t, b)
    if lr == 0 or tb == 0:
        return 0.0
    return math.sqrt((min(l, r) / lr) * (min(t, b) / tb))


def centerness_array(reg: np.ndarray) -> np.ndarray:
    """Vectorised centerness over an ``(N, 4)`` array of ltrb distances."""
    lr_max = np.maximum(reg[:, 0], reg[:, 2])
    tb_max = np.maximum(reg[:, 1], reg[:, 3])
    lr = np.divide(np.minimum(reg[:, 0], reg[:, 2]), lr_max, out=np.zeros(len(reg)), where=lr_max > 0)
    tb = np.divide(np.minimum(reg[:, 1], reg[:, 3]), tb_max, out=np.zeros(len(reg)), where=tb_max > 0)
    return np.sqrt(lr * tb)


def assign_level(targets: Sequence[float], cfg: FpnConfig) -> Optional[int]:
    """Index (into ``cfg.levels``) of the level responsible for these distances."""
    m = max(targets)
    if m <= 0:
        return None
    for spec in cfg.active_levels():
        if spec.lower < m <= spec.upper:
            return spec.index
    return None


def center_sampling_region(b: Box, stride: float, radius_factor: float) -> Box:
    if radius_factor <= 0:
        raise ValueError("radius_factor must be > 0")
    cx = (b.x0 + b.x1) / 2
    cy = (b.y0 + b.y1) / 2
    rad = radius_factor * stride
    return Box(max(b.x0, cx - rad), max(b.y0, cy - rad), min(b.x1, cx + rad), min(b.y1, cy + rad))


class TargetSet:
    """Column-oriented targets for every location of every active level.

    Rows are ordered by level, then row-major within a level. Background rows
    carry ``class_label == 0``, ``source == -1`` and NaN regression/centerness.
    Iterating yields :class:`LocationTarget` records.
    """

    def __init__(self, *, level_index, grid_x, grid_y, image_x, image_y, class_label,
                 regression, centerness, source, is_ambiguous, ambiguous_cross_class,
                 strides, level_slices, level_shapes, image_size, n_skipped=0):
        self.level_index = level_index
        self.grid_x = grid_x
        self.grid_y = grid_y
        self.image_x = image_x
        self.image_y = image_y
        self.class_label = class_label
        self.regression = regression
        self.centerness = centerness
        self.source = source
        self.is_ambiguous = is_ambiguous
        self.ambiguous_cross_class = ambiguous_cross_class
        self.strides = strides
        self.level_slices = level_slices
        self.level_shapes = level_shapes
        self.image_size = image_size
        self.n_skipped = n_skipped

    def __len__(self) -> int:
        return len(self.class_label)

    def __iter__(self) -> Iterator[LocationTarget]:
        for i in range(len(self)):
            yield self.record(i)

    def record(self, i: int) -> LocationTarget:
        pos = self.class_label[i] > 0
        return LocationTarget(
            level_index=int(self.level_index[i]),
            grid_x=int(self.grid_x[i]),
            grid_y=int(self.grid_y[i]),
            image_x=int(self.image_x[i]),
            image_y=int(self.image_y[i]),
            class_label=int(self.class_label[i]),
            regression=tuple(float(v) for v in self.regression[i]) if pos else None,
            centerness=float(self.centerness[i]) if pos else None,
            source_annotation=int(self.source[i]) if pos else None,
            is_ambiguous=bool(self.is_ambiguous[i]),
            ambiguous_cross_class=bool(self.ambiguous_cross_class[i]),
        )

    @property
    def positive(self) -> np.ndarray:
        return self.class_label > 0

    @property
    def n_pos(self) -> int:
        return int(np.count_nonzero(self.class_label))

    def positives(self) -> list[LocationTarget]:
        return [self.record(i) for i in np.flatnonzero(self.positive)]

    def recalled_annotations(self) -> set[int]:
        return set(np.unique(self.source[self.positive]).tolist())

    def index_of(self, level_index: int, grid_x: int, grid_y: int) -> int:
        """Row of a location given its provenance."""
        if level_index not in self.level_slices:
            raise KeyError(f"level {level_index} not present")
        shape = self.level_shapes[level_index]
        if not (0 <= grid_x < shape.width and 0 <= grid_y < shape.height):
            raise KeyError(f"location ({grid_x}, {grid_y}) outside level {level_index} grid")
        return self.level_slices[level_index].start + grid_y * shape.width + grid_x


def _split_gts(gts: Iterable[LabeledBox], include_crowd: bool):
    boxes, classes, order = [], [], []
    n_skipped = 0
    for g in gts:
        if g.is_crowd and not include_crowd:
            continue
        b = g.box
        if (b.x1 - b.x0) <= 0 or (b.y1 - b.y0) <= 0:
            n_skipped += 1
            continue
        boxes.append(b.as_tuple())
        classes.append(int(g.class_id))
        order.append(int(g.annotation_index))
    return (
        np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
        np.asarray(classes, dtype=np.int64),
        np.asarray(order, dtype=np.int64),
        n_skipped,
    )


def build_targets(image_size, gts: Iterable[LabeledBox], cfg: FpnConfig = None,
                  include_crowd: bool = False) -> TargetSet:
    """Assign every location of every active level to a class and regression target.

    Parameters
    ----------
    image_size : (width, height)
    gts : ground-truth boxes in image coordinates.
    cfg : pyramid layout; defaults to :class:`FpnConfig()`.
    include_crowd : keep ``is_crowd`` boxes as ordinary targets.
    """
    cfg = cfg or FpnConfig()
    width, height = int(image_size[0]), int(image_size[1])
    if width < 1 or height < 1:
        raise ValueError(f"image dimensions must be >= 1, got {image_size}")
    boxes, classes, ann_idx, n_skipped = _split_gts(gts, include_crowd)
    if n_skipped:
        logger.warning("skipped %d zero-area ground-truth boxes", n_skipped)

    # candidate order: smallest area first, annotation index breaks ties
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    order = np.lexsort((ann_idx, areas))
    boxes, classes, ann_idx = boxes[order], classes[order], ann_idx[order]
    n_gt = len(boxes)

    cols = {k: [] for k in ("level", "gx", "gy", "ix", "iy", "cls", "reg", "ctr", "src", "amb", "cross")}
    level_slices = {}
    level_shapes = {}
    strides = {}
    start = 0
    for spec in cfg.active_levels():
        s = spec.stride
        shape = grid_shape(width, height, s)
        xs = (s // 2 + np.arange(shape.width) * s).astype(np.float64)
        ys = (s // 2 + np.arange(shape.height) * s).astype(np.float64)
        gx, gy = np.meshgrid(np.arange(shape.width), np.arange(shape.height))
        n = shape.width * shape.height

        cls = np.zeros(n, dtype=np.int64)
        reg = np.full((n, 4), np.nan)
        ctr = np.full(n, np.nan)
        src = np.full(n, -1, dtype=np.int64)
        amb = np.zeros(n, dtype=bool)
        cross = np.zeros(n, dtype=bool)

        if n_gt:
            l = xs[None, :] - boxes[:, 0:1]  # (G, W)
            r = boxes[:, 2:3] - xs[None, :]
            t = ys[None, :] - boxes[:, 1:2]  # (G, H)
            b = boxes[:, 3:4] - ys[None, :]
            if cfg.center_sampling:
                cx = (boxes[:, 0] + boxes[:, 2]) / 2
                cy = (boxes[:, 1] + boxes[:, 3]) / 2
                rad = cfg.radius_factor * s
                rx0 = np.maximum(boxes[:, 0], cx - rad)[:, None]
                rx1 = np.minimum(boxes[:, 2], cx + rad)[:, None]
                ry0 = np.maximum(boxes[:, 1], cy - rad)[:, None]
                ry1 = np.minimum(boxes[:, 3], cy + rad)[:, None]
                in_x = (xs[None, :] >= rx0) & (xs[None, :] <= rx1)
                in_y = (ys[None, :] >= ry0) & (ys[None, :] <= ry1)
            else:
                in_x = (l >= 0) & (r >= 0)
                in_y = (t >= 0) & (b >= 0)
            max_d = np.maximum(np.maximum(t, b)[:, :, None], np.maximum(l, r)[:, None, :])
            cand = in_y[:, :, None] & in_x[:, None, :] & (max_d > spec.lower) & (max_d <= spec.upper)
            cand = cand.reshape(n_gt, n)

            count = cand.sum(axis=0)
            pos = count > 0
            first = np.argmax(cand, axis=0)
            g = first[pos]
            pix = np.flatnonzero(pos)
            px, py = xs[gx.ravel()[pix]], ys[gy.ravel()[pix]]
            targets = np.stack(
                [px - boxes[g, 0], py - boxes[g, 1], boxes[g, 2] - px, boxes[g, 3] - py], axis=1
            )
            cls[pix] = classes[g]
            src[pix] = ann_idx[g]
            ctr[pix] = centerness_array(targets)
            reg[pix] = targets / s if cfg.normalize_targets else targets
            amb = count > 1
            if amb.any():
                big = np.iinfo(np.int64).max
                cmin = np.where(cand, classes[:, None], big).min(axis=0)
                cmax = np.where(cand, classes[:, None], -1).max(axis=0)
                cross = amb & (cmin != cmax)

        cols["level"].append(np.full(n, spec.index, dtype=np.int64))
        cols["gx"].append(gx.ravel())
        cols["gy"].append(gy.ravel())
        cols["ix"].append((s // 2 + gx.ravel() * s).astype(np.int64))
        cols["iy"].append((s // 2 + gy.ravel() * s).astype(np.int64))
        cols["cls"].append(cls)
        cols["reg"].append(reg)
        cols["ctr"].append(ctr)
        cols["src"].append(src)
        cols["amb"].append(amb)
        cols["cross"].append(cross)
        level_slices[spec.index] = slice(start, start + n)
        level_shapes[spec.index] = shape
        strides[spec.index] = s
        start += n

    cat = {k: np.concatenate(v) if v else np.zeros(0) for k, v in cols.items()}
    return TargetSet(
        level_index=cat["level"], grid_x=cat["gx"], grid_y=cat["gy"],
        image_x=cat["ix"], image_y=cat["iy"], class_label=cat["cls"],
        regression=cat["reg"].reshape(-1, 4), centerness=cat["ctr"], source=cat["src"],
        is_ambiguous=cat["amb"].astype(bool), ambiguous_cross_class=cat["cross"].astype(bool),
        strides=strides, level_slices=level_slices, level_shapes=level_shapes, image_size=(width, height),
        n_skipped=n_skipped,
    )


@dataclass(frozen=True)
class AmbiguityCounts:
    positives: int
    ambiguous: int
    cross_class: int

    @property
    def ratio(self) -> float:
        return self.ambiguous / self.positives if self.positives else 0.0

    @property
    def cross_class_ratio(self) -> float:
        return self.cross_class / self.positives if self.positives else 0.0


def _ambiguity_one(args):
    image_size, gts, cfg, include_crowd = args
    ts = build_targets(image_size, gts, cfg, include_crowd=include_crowd)
    pos = ts.positive
    return (int(pos.sum()), int((ts.is_ambiguous & pos).sum()), int((ts.ambiguous_cross_class & pos).sum()))


def ambiguity_counts(scenes, cfg: FpnConfig = None, include_crowd: bool = False,
                     threads: Optional[int] = 1) -> AmbiguityCounts:
    """Aggregate positive / ambiguous counts over ``(image_size, gts)`` pairs."""
    cfg = cfg or FpnConfig()
    jobs = [(size, gts, cfg, include_crowd) for size, gts in scenes]
    if not jobs:
        raise ValueError("dataset is empty")
    totals = np.zeros(3, dtype=np.int64)
    for counts in parallel_map(_ambiguity_one, jobs, threads):
        totals += counts
    return AmbiguityCounts(*(int(v) for v in totals))


def ambiguity_stats(scenes, cfg: FpnConfig = None, exclude_same_class: bool = False,
                    include_crowd: bool = False, threads: Optional[int] = 1) -> tuple[float, int]:
    """Share of positives claimed by more than one box, and the positive count."""
    counts = ambiguity_counts(scenes, cfg, include_crowd=include_crowd, threads=threads)
    ratio = counts.cross_class_ratio if exclude_same_class else counts.ratio
    return ratio, counts.positives
