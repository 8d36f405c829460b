"""Post-network decoding: level scaling, box inversion, score fusion and NMS."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

from .config import FpnConfig, InferenceOptions
from .geometry import Box, as_box_array, pairwise_iou

EXP_CLAMP = 20.0


@dataclass(frozen=True)
class RawPrediction:
    level_index: int
    grid_x: int
    grid_y: int
    class_probs: tuple
    raw_regression: tuple
    centerness_prob: float


@dataclass(frozen=True)
class LevelScale:
    value: float = 1.0


@dataclass(frozen=True)
class Detection:
    box: Box
    class_id: int
    cls_score: float
    centerness: float = 1.0
    final_score: Optional[float] = None
    level_index: Optional[int] = None
    grid_x: Optional[int] = None
    grid_y: Optional[int] = None
    image_id: Optional[int] = None

    def __post_init__(self):
        if self.final_score is None:
            object.__setattr__(self, "final_score", self.cls_score * self.centerness)

    @property
    def has_provenance(self) -> bool:
        return None not in (self.level_index, self.grid_x, self.grid_y)


@dataclass
class LevelOutput:
    """Dense head outputs for one level: ``(H, W, C)``, ``(H, W, 4)`` pre-exp, ``(H, W)``."""

    class_probs: np.ndarray
    regression: np.ndarray
    centerness: np.ndarray


def decode(image_x: float, image_y: float, ltrb) -> Box:
    l, t, r, b = ltrb
    return Box(image_x - l, image_y - t, image_x + r, image_y + b)


def decode_array(points: np.ndarray, ltrb: np.ndarray) -> np.ndarray:
    return np.concatenate([points - ltrb[:, :2], points + ltrb[:, 2:]], axis=1)


def apply_scale(raw, scale=1.0, normalize_targets: bool = False, stride: float = 1.0) -> np.ndarray:
    """``exp(s * raw)`` with the exponent clamped at 20; times ``stride`` for normalised targets."""
    s = scale.value if isinstance(scale, LevelScale) else float(scale)
    out = np.exp(np.minimum(s * np.asarray(raw, dtype=np.float64), EXP_CLAMP))
    if normalize_targets:
        out = out * stride
    return out


def fuse_scores(cls_score, centerness):
    return cls_score * centerness


def select_candidates(preds: Sequence[RawPrediction], threshold: float = 0.05) -> list:
    """``((level, grid_x, grid_y), class_id, score)`` for every class probability above ``threshold``."""
    out = []
    for p in preds:
        for c, prob in enumerate(p.class_probs):
            if prob > threshold:
                out.append(((p.level_index, p.grid_x, p.grid_y), c + 1, float(prob)))
    return out


def nms_indices(boxes, scores, classes=None, iou_threshold: float = 0.5,
                per_class: bool = True) -> np.ndarray:
    """Greedy NMS; returns kept indices ordered by descending score.

    Equal scores are visited in original index order. A box is dropped when
    its IoU with an already kept box (of the same class when ``per_class``)
    exceeds ``iou_threshold``.
    """
    boxes = as_box_array(boxes)
    scores = np.asarray(scores, dtype=np.float64)
    if len(scores) == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    if per_class and classes is not None:
        classes = np.asarray(classes)
    else:
        classes = np.zeros(len(scores), dtype=np.int64)
    alive = np.ones(len(order), dtype=bool)
    b = boxes[order]
    c = classes[order]
    keep = []
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        rest = np.flatnonzero(alive[i + 1:]) + i + 1
        if rest.size == 0:
            continue
        same = rest[c[rest] == c[i]]
        if same.size == 0:
            continue
        ious = pairwise_iou(b[i:i + 1], b[same])[0]
        alive[same[ious > iou_threshold]] = False
    return np.asarray(keep, dtype=np.int64)


def nms(dets: Sequence[Detection], iou_threshold: float = 0.5, per_class: bool = True) -> list[Detection]:
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must lie in (0, 1)")
    if not dets:
        return []
    boxes = np.array([d.box.as_tuple() for d in dets], dtype=np.float64)
    scores = np.array([d.final_score for d in dets], dtype=np.float64)
    classes = np.array([d.class_id for d in dets])
    keep = nms_indices(boxes, scores, classes, iou_threshold, per_class)
    return [dets[i] for i in keep]


@dataclass
class CandidateArrays:
    """Pre-NMS candidates in columnar form (all levels)."""

    boxes: np.ndarray
    class_ids: np.ndarray
    cls_scores: np.ndarray
    centerness: np.ndarray
    final_scores: np.ndarray
    level_index: np.ndarray
    grid_x: np.ndarray
    grid_y: np.ndarray

    def __len__(self) -> int:
        return len(self.final_scores)

    def subset(self, idx) -> "CandidateArrays":
        return CandidateArrays(**{k: v[idx] for k, v in self.__dict__.items()})

    def to_detections(self, image_id: Optional[int] = None) -> list[Detection]:
        return [
            Detection(
                box=Box(*map(float, self.boxes[i])),
                class_id=int(self.class_ids[i]),
                cls_score=float(self.cls_scores[i]),
                centerness=float(self.centerness[i]),
                final_score=float(self.final_scores[i]),
                level_index=int(self.level_index[i]),
                grid_x=int(self.grid_x[i]),
                grid_y=int(self.grid_y[i]),
                image_id=image_id,
            )
            for i in range(len(self))
        ]


def _level_scale(scales, level_index: int) -> float:
    if scales is None:
        return 1.0
    if isinstance(scales, Mapping):
        s = scales.get(level_index, 1.0)
    else:
        s = scales[level_index]
    return s.value if isinstance(s, LevelScale) else float(s)


def collect_candidates(outputs: Mapping[int, LevelOutput], image_size, cfg: FpnConfig = None,
                       scales=None, options: InferenceOptions = InferenceOptions()) -> CandidateArrays:
    """Threshold, decode, fuse and clip every level's outputs (no NMS)."""
    cfg = cfg or FpnConfig()
    width, height = image_size
    parts = []
    for spec in cfg.active_levels():
        if spec.index not in outputs:
            continue
        out = outputs[spec.index]
        probs = np.asarray(out.class_probs, dtype=np.float64)
        h, w, c = probs.shape
        ys, xs, cs = np.nonzero(probs > options.score_threshold)
        if ys.size == 0:
            continue
        cls_scores = probs[ys, xs, cs]
        ctr = np.asarray(out.centerness, dtype=np.float64)[ys, xs]
        final = fuse_scores(cls_scores, ctr) if options.fuse_centerness else cls_scores.copy()
        if not options.fuse_centerness:
            ctr = np.ones_like(ctr)
        if options.pre_nms_top_k is not None and final.size > options.pre_nms_top_k:
            top = np.argsort(-final, kind="stable")[: options.pre_nms_top_k]
            top.sort()
            ys, xs, cs, cls_scores, ctr, final = ys[top], xs[top], cs[top], cls_scores[top], ctr[top], final[top]
        ltrb = apply_scale(
            np.asarray(out.regression, dtype=np.float64)[ys, xs],
            _level_scale(scales, spec.index),
            cfg.normalize_targets,
            spec.stride,
        )
        half = spec.stride // 2
        points = np.stack([half + xs * spec.stride, half + ys * spec.stride], axis=1).astype(np.float64)
        boxes = decode_array(points, ltrb)
        boxes[:, 0::2] = np.clip(boxes[:, 0::2], 0.0, width)
        boxes[:, 1::2] = np.clip(boxes[:, 1::2], 0.0, height)
        parts.append(CandidateArrays(
            boxes=boxes, class_ids=cs + 1, cls_scores=cls_scores, centerness=ctr,
            final_scores=final, level_index=np.full(ys.size, spec.index),
            grid_x=xs, grid_y=ys,
        ))
    if not parts:
        z = np.zeros(0)
        zi = np.zeros(0, dtype=np.int64)
        return CandidateArrays(np.zeros((0, 4)), zi, z, z, z, zi, zi, zi)
    return CandidateArrays(**{
        k: np.concatenate([getattr(p, k) for p in parts]) for k in parts[0].__dict__
    })


def run_inference(outputs: Mapping[int, LevelOutput], image_size, cfg: FpnConfig = None,
                  scales=None, options: InferenceOptions = InferenceOptions(),
                  image_id: Optional[int] = None) -> list[Detection]:
    """Full post-processing for one image; detections sorted by final score."""
    cand = collect_candidates(outputs, image_size, cfg, scales, options)
    if len(cand) == 0:
        return []
    keep = nms_indices(cand.boxes, cand.final_scores, cand.class_ids,
                       options.nms_threshold, options.per_class_nms)
    if options.max_detections is not None:
        keep = keep[: options.max_detections]
    return cand.subset(keep).to_detections(image_id)
