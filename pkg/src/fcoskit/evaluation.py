"""Recall bounds, PR curves, COCO-style AP/AR and the center-ness scatter.

Ground truths are passed as a mapping ``image_id -> list[LabeledBox]`` and
detections as ``image_id -> list[Detection]``; detections are ranked by
their fused ``final_score``. Crowd boxes are left out of matching and of
every denominator unless ``include_crowd`` is set.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .assignment import TargetSet, build_targets
from .config import AnchorConfig, FpnConfig, ResizeSpec
from .geometry import LabeledBox, pairwise_iou
from .inference import Detection
from .parallel import parallel_map

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_GRID = np.linspace(0.0, 1.0, 101)


class MatchPolicy(enum.Enum):
    """Anchor labelling rules compared in the recall study.

    ``NONE``: an anchor is positive when its best IoU is at least 0.5.
    ``LOW_QUALITY_04``: additionally, each box's highest-IoU anchors (ties
    included) become positive when that IoU is at least 0.4.
    ``ALL``: the same low-quality rule for any IoU above zero.

    A positive anchor always belongs to the box it overlaps most, so a box
    whose best anchor is taken by a neighbour may remain unrecalled.
    """

    NONE = "none"
    LOW_QUALITY_04 = "low04"
    ALL = "all"


def _scenes(data, resize: Optional[ResizeSpec]):
    if hasattr(data, "scenes"):
        return list(data.scenes(resize))
    return list(data)


def _countable(gts: Sequence[LabeledBox], include_crowd: bool) -> list[LabeledBox]:
    return [g for g in gts if include_crowd or not g.is_crowd]


def _fcos_recall_one(args):
    size, gts, cfg, include_crowd = args
    keep = _countable(gts, include_crowd)
    if not keep:
        return 0, 0
    ts = build_targets(size, keep, cfg, include_crowd=True)
    recalled = ts.recalled_annotations()
    return sum(1 for g in keep if g.annotation_index in recalled), len(keep)


def fcos_bpr(data, cfg: FpnConfig = None, resize: Optional[ResizeSpec] = ResizeSpec(),
             include_crowd: bool = False, threads: Optional[int] = 1) -> float:
    """Best possible recall (percent) of location-based assignment.

    ``data`` is a :class:`~fcoskit.dataio.Dataset` (resized with ``resize``) or
    an iterable of ``((width, height), gts)`` already in network coordinates.
    """
    cfg = cfg or FpnConfig()
    scenes = _scenes(data, resize)
    if not scenes:
        raise ValueError("dataset is empty")
    jobs = [(size, gts, cfg, include_crowd) for size, gts in scenes]
    counts = np.array(parallel_map(_fcos_recall_one, jobs, threads), dtype=np.int64).reshape(-1, 2)
    hit, total = counts.sum(axis=0)
    return 100.0 * hit / total if total else 0.0


def generate_anchors(image_size, anchors: AnchorConfig = AnchorConfig()) -> np.ndarray:
    """All anchors of an image as an ``(A, 4)`` array; centres match the location mapping."""
    width, height = image_size
    out = []
    for li, (_, s) in enumerate(anchors.levels):
        gw, gh = -(-width // s), -(-height // s)
        cx = s // 2 + np.arange(gw) * s
        cy = s // 2 + np.arange(gh) * s
        cxx, cyy = np.meshgrid(cx, cy)
        for aw, ah in anchors.shapes(li):
            out.append(np.stack([cxx - aw / 2, cyy - ah / 2, cxx + aw / 2, cyy + ah / 2], axis=-1).reshape(-1, 4))
    return np.concatenate(out).astype(np.float64)


def _anchor_blocks(image_size, anchors: AnchorConfig, boxes: np.ndarray):
    """Yield IoU blocks ``(G, H*W)`` per (level, shape), computed separably on the grid."""
    width, height = image_size
    g_area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    for li, (_, s) in enumerate(anchors.levels):
        gw, gh = -(-width // s), -(-height // s)
        cx = (s // 2 + np.arange(gw) * s).astype(np.float64)
        cy = (s // 2 + np.arange(gh) * s).astype(np.float64)
        for aw, ah in anchors.shapes(li):
            iw = np.minimum(cx + aw / 2, boxes[:, 2:3]) - np.maximum(cx - aw / 2, boxes[:, 0:1])
            ih = np.minimum(cy + ah / 2, boxes[:, 3:4]) - np.maximum(cy - ah / 2, boxes[:, 1:2])
            inter = np.clip(ih, 0, None)[:, :, None] * np.clip(iw, 0, None)[:, None, :]
            union = g_area[:, None, None] + aw * ah - inter
            yield (inter / union).reshape(len(boxes), -1)


def anchor_matches(image_size, boxes, anchors: AnchorConfig = AnchorConfig(),
                   policy: MatchPolicy = MatchPolicy.LOW_QUALITY_04,
                   positive_iou: float = 0.5) -> np.ndarray:
    """Boolean mask over ``boxes``: which boxes own at least one positive anchor."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = len(boxes)
    if n == 0:
        return np.zeros(0, dtype=bool)
    recalled = np.zeros(n, dtype=bool)
    gt_best = np.zeros(n)
    owners = []
    for block in _anchor_blocks(image_size, anchors, boxes):
        owner = np.argmax(block, axis=0)
        best = block[owner, np.arange(block.shape[1])]
        recalled[owner[best >= positive_iou]] = True
        gt_best = np.maximum(gt_best, block.max(axis=1))
        owners.append(owner)
    if policy is MatchPolicy.NONE:
        return recalled
    floor = 0.4 if policy is MatchPolicy.LOW_QUALITY_04 else 0.0
    eligible = (gt_best >= floor) & (gt_best > 0)
    if not eligible.any():
        return recalled
    for block, owner in zip(_anchor_blocks(image_size, anchors, boxes), owners):
        hits = (block == gt_best[:, None]) & eligible[:, None]
        cols = np.flatnonzero(hits.any(axis=0))
        recalled[owner[cols]] = True
    return recalled


def _anchor_recall_one(args):
    size, gts, anchors, policy, include_crowd = args
    keep = _countable(gts, include_crowd)
    if not keep:
        return 0, 0
    boxes = np.array([g.box.as_tuple() for g in keep], dtype=np.float64)
    return int(anchor_matches(size, boxes, anchors, policy).sum()), len(keep)


def anchor_bpr(data, anchors: AnchorConfig = AnchorConfig(),
               policy: MatchPolicy = MatchPolicy.LOW_QUALITY_04,
               resize: Optional[ResizeSpec] = ResizeSpec(), include_crowd: bool = False,
               threads: Optional[int] = 1) -> float:
    """Best possible recall (percent) of anchor matching under ``policy``."""
    scenes = _scenes(data, resize)
    if not scenes:
        raise ValueError("dataset is empty")
    jobs = [(size, gts, anchors, policy, include_crowd) for size, gts in scenes]
    counts = np.array(parallel_map(_anchor_recall_one, jobs, threads), dtype=np.int64).reshape(-1, 2)
    hit, total = counts.sum(axis=0)
    return 100.0 * hit / total if total else 0.0


@dataclass(frozen=True)
class PrCurve:
    """Precision/recall sampled at every distinct score threshold, highest first."""

    thresholds: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    iou_threshold: float
    class_agnostic: bool
    n_gt: int = 0
    n_matched: int = 0

    def rows(self) -> list[tuple[float, float, float]]:
        """Export rows, starting from the ``(inf, 1, 0)`` origin."""
        rows = [(float("inf"), 1.0, 0.0)]
        rows += [(float(t), float(p), float(r)) for t, p, r in zip(self.thresholds, self.precision, self.recall)]
        return rows


def _match_image(dets: Sequence[Detection], gts: Sequence[LabeledBox], iou_thr: float,
                 class_agnostic: bool) -> tuple[np.ndarray, np.ndarray]:
    """Greedy matching for one image; returns (scores, is_tp) in ranked order."""
    scores = np.array([d.final_score for d in dets], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    tp = np.zeros(len(dets), dtype=bool)
    if not dets or not gts:
        return scores[order], tp
    gts = sorted(gts, key=lambda g: g.annotation_index)
    det_boxes = np.array([dets[i].box.as_tuple() for i in order])
    gt_boxes = np.array([g.box.as_tuple() for g in gts])
    ious = pairwise_iou(det_boxes, gt_boxes)
    if not class_agnostic:
        same = np.array([dets[i].class_id for i in order])[:, None] == np.array([g.class_id for g in gts])[None, :]
        ious = np.where(same, ious, -1.0)
    taken = np.zeros(len(gts), dtype=bool)
    for k in range(len(order)):
        cand = np.where(taken, -1.0, ious[k])
        j = int(np.argmax(cand))
        if cand[j] >= iou_thr:
            taken[j] = True
            tp[k] = True
    return scores[order], tp


def _as_gt_map(gts) -> Mapping[int, list[LabeledBox]]:
    if hasattr(gts, "annotations"):
        return gts.annotations
    return gts


def _gather(dets, gts, iou_thr, class_agnostic, include_crowd, max_dets=None):
    gts = _as_gt_map(gts)
    all_scores, all_tp = [], []
    n_gt = 0
    for image_id in sorted(set(gts) | set(dets), key=str):
        g = _countable(gts.get(image_id, []), include_crowd)
        d = list(dets.get(image_id, []))
        if max_dets is not None:
            d = _top_k(d, max_dets, per_class=not class_agnostic)
        n_gt += len(g)
        s, tp = _match_image(d, g, iou_thr, class_agnostic)
        all_scores.append(s)
        all_tp.append(tp)
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    tp = np.concatenate(all_tp) if all_tp else np.zeros(0, dtype=bool)
    return scores, tp, n_gt


def _top_k(dets: list[Detection], k: int, per_class: bool) -> list[Detection]:
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].final_score, i))
    if not per_class:
        return [dets[i] for i in order[:k]]
    counts: dict[int, int] = {}
    kept = []
    for i in order:
        c = dets[i].class_id
        if counts.get(c, 0) < k:
            counts[c] = counts.get(c, 0) + 1
            kept.append(i)
    return [dets[i] for i in sorted(kept)]


def pr_curve(dets, gts, iou_threshold: float = 0.5, class_agnostic: bool = False,
             include_crowd: bool = False, max_dets: Optional[int] = None) -> PrCurve:
    scores, tp, n_gt = _gather(dets, gts, iou_threshold, class_agnostic, include_crowd, max_dets)
    order = np.argsort(-scores, kind="stable")
    scores, tp = scores[order], tp[order]
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(~tp)
    # one sample per distinct threshold: the last detection of each tie group
    last = np.ones(len(scores), dtype=bool)
    if len(scores) > 1:
        last[:-1] = scores[:-1] != scores[1:]
    tp_s, fp_s = tp_cum[last], fp_cum[last]
    precision = tp_s / np.maximum(tp_s + fp_s, 1)
    recall = tp_s / n_gt if n_gt else np.zeros(len(tp_s))
    return PrCurve(
        thresholds=scores[last], precision=precision.astype(np.float64),
        recall=recall.astype(np.float64), iou_threshold=iou_threshold,
        class_agnostic=class_agnostic, n_gt=n_gt, n_matched=int(tp.sum()),
    )


def average_precision(curve: PrCurve) -> float:
    """101-point interpolated AP: mean over recall levels of the best precision at or beyond them."""
    if len(curve.recall) == 0 or curve.n_gt == 0:
        return 0.0
    envelope = np.maximum.accumulate(curve.precision[::-1])[::-1]
    idx = np.searchsorted(curve.recall, RECALL_GRID, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def _categories(gts, include_crowd) -> list[int]:
    gts = _as_gt_map(gts)
    return sorted({g.class_id for v in gts.values() for g in _countable(v, include_crowd)})


def _filter_class(mapping, class_id):
    return {k: [x for x in v if x.class_id == class_id] for k, v in mapping.items()}


def mean_average_precision(dets, gts, iou_threshold: float, class_agnostic: bool = False,
                           include_crowd: bool = False, max_dets: Optional[int] = 100) -> float:
    """AP at one IoU threshold, averaged over categories unless class-agnostic."""
    if class_agnostic:
        return average_precision(pr_curve(dets, gts, iou_threshold, True, include_crowd, max_dets))
    gts = _as_gt_map(gts)
    cats = _categories(gts, include_crowd)
    if not cats:
        return 0.0
    aps = [
        average_precision(pr_curve(_filter_class(dets, c), _filter_class(gts, c), iou_threshold,
                                   False, include_crowd, max_dets))
        for c in cats
    ]
    return float(np.mean(aps))


def _recall_at(dets, gts, iou_thr, max_dets, class_agnostic, include_crowd) -> float:
    _, tp, n_gt = _gather(dets, gts, iou_thr, class_agnostic, include_crowd, max_dets)
    return tp.sum() / n_gt if n_gt else 0.0


def average_recall(dets, gts, max_dets: int = 100, class_agnostic: bool = False,
                   include_crowd: bool = False) -> float:
    """Recall averaged over IoU 0.50:0.05:0.95 with at most ``max_dets`` detections per image."""
    gts = _as_gt_map(gts)
    if class_agnostic:
        groups = [(dets, gts)]
    else:
        groups = [(_filter_class(dets, c), _filter_class(gts, c)) for c in _categories(gts, include_crowd)]
    if not groups:
        return 0.0
    per_group = [
        np.mean([_recall_at(d, g, t, max_dets, class_agnostic, include_crowd) for t in IOU_THRESHOLDS])
        for d, g in groups
    ]
    return float(np.mean(per_group))


@dataclass
class EvalReport:
    AP: float = 0.0
    AP50: float = 0.0
    AP75: float = 0.0
    AP90: float = 0.0
    AR1: float = 0.0
    AR10: float = 0.0
    AR100: float = 0.0
    BPR: Optional[float] = None
    ambiguous_ratio: Optional[float] = None
    ambiguous_cross_class_ratio: Optional[float] = None
    class_agnostic: bool = False

    def as_dict(self, percent: bool = True) -> dict:
        out = {}
        for key, value in self.__dict__.items():
            if isinstance(value, float) and percent and key != "BPR":
                value = 100.0 * value
            out[key] = value
        return out

    def table(self) -> str:
        rows = [(k, v) for k, v in self.as_dict().items() if isinstance(v, float)]
        width = max(len(k) for k, _ in rows)
        return "\n".join(f"{k:<{width}}  {v:7.2f}" for k, v in rows)


def evaluate(dets, gts, class_agnostic: bool = False, include_crowd: bool = False,
             max_dets: int = 100) -> EvalReport:
    aps = {
        float(t): mean_average_precision(dets, gts, float(t), class_agnostic, include_crowd, max_dets)
        for t in IOU_THRESHOLDS
    }
    ap90 = mean_average_precision(dets, gts, 0.9, class_agnostic, include_crowd, max_dets)
    return EvalReport(
        AP=float(np.mean(list(aps.values()))),
        AP50=aps[float(IOU_THRESHOLDS[0])],
        AP75=aps[float(IOU_THRESHOLDS[5])],
        AP90=ap90,
        AR1=average_recall(dets, gts, 1, class_agnostic, include_crowd),
        AR10=average_recall(dets, gts, 10, class_agnostic, include_crowd),
        AR100=average_recall(dets, gts, 100, class_agnostic, include_crowd),
        class_agnostic=class_agnostic,
    )


@dataclass(frozen=True)
class ScatterPoint:
    x: float
    y: float


def centerness_scatter(dets, gts, fused: bool = True) -> list[ScatterPoint]:
    """One point per detection: score on x, best IoU with any box of the same image on y."""
    gts = _as_gt_map(gts)
    points = []
    for image_id in sorted(dets, key=str):
        d = dets[image_id]
        g = gts.get(image_id, [])
        if g and d:
            ious = pairwise_iou(np.array([x.box.as_tuple() for x in d]), np.array([x.box.as_tuple() for x in g]))
            best = ious.max(axis=1)
        else:
            best = np.zeros(len(d))
        for det, y in zip(d, best):
            x = det.cls_score * det.centerness if fused else det.cls_score
            points.append(ScatterPoint(float(x), float(y)))
    return points


def ambiguous_detection_ratio(dets, targets: Mapping[int, TargetSet]) -> tuple[float, float]:
    """Share of detections produced by ambiguous (and cross-class ambiguous) locations."""
    n = amb = cross = 0
    for image_id, d in dets.items():
        for det in d:
            if not det.has_provenance:
                raise ValueError(f"detection in image {image_id} lacks level/location provenance")
            ts = targets[image_id]
            row = ts.index_of(det.level_index, det.grid_x, det.grid_y)
            n += 1
            amb += bool(ts.is_ambiguous[row])
            cross += bool(ts.ambiguous_cross_class[row])
    if n == 0:
        return 0.0, 0.0
    return amb / n, cross / n
