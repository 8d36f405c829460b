"""Desk-scale end-to-end check: a per-location linear head on synthetic scenes.

Scene features are built from the real assignment output, so a linear head
can in principle recover classes, boxes and center-ness. Regression
features get noisier away from the box centre, which gives the center-ness
branch something to rank.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import spearmanr

from .assignment import TargetSet, build_targets
from .config import FpnConfig, InferenceOptions, LossOptions
from .geometry import Box, LabeledBox, pairwise_iou
from .gradcheck import GradCheckResult, relative_error
from .inference import EXP_CLAMP, LevelOutput, collect_candidates, nms_indices
from .losses import LossReport, Predictions, total_loss

logger = logging.getLogger(__name__)

N_CLASSES = 3
N_FEATURES = 32
IMAGE_SIZE = (640, 640)
# max-side ranges (px) that put positives on P3 .. P7 respectively
SIZE_TIERS = ((20.0, 60.0), (90.0, 128.0), (180.0, 250.0), (330.0, 480.0), (560.0, 630.0))
REG_NOISE = 0.3
FEATURE_NOISE = 0.05
CLASS_GAIN = 2.5
LOG_CENTER = 1.0
DIST_FLOOR = 0.05
LOG_GAIN = 0.95
RATIO_GAIN = 1.26
RATIO_CENTER = 1.2
NOISE_POWER = 2.0


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int):
        super().__init__(f"loss became non-finite at epoch {epoch}")
        self.epoch = epoch


@dataclass
class SyntheticScene:
    seed: int
    image_size: tuple[int, int]
    gts: list[LabeledBox]
    cfg: FpnConfig
    targets: TargetSet
    features: np.ndarray  # (N, D), aligned with targets rows

    @property
    def strides(self) -> np.ndarray:
        return np.array([self.targets.strides[i] for i in self.targets.level_index], dtype=np.float64)


def _sample_boxes(rng: np.random.Generator, seed: int, image_size, n_classes: int) -> list[LabeledBox]:
    width, height = image_size
    n = 1 + int(rng.integers(0, 5))
    tiers = [seed % len(SIZE_TIERS)] + [int(rng.integers(0, len(SIZE_TIERS))) for _ in range(n - 1)]
    out = []
    for k, tier in enumerate(tiers):
        lo, hi = SIZE_TIERS[tier]
        long_side = min(rng.uniform(lo, hi), min(width, height) - 2.0)
        short_side = long_side * rng.uniform(0.5, 1.0)
        w, h = (long_side, short_side) if rng.random() < 0.5 else (short_side, long_side)
        x0 = rng.uniform(0.0, width - w)
        y0 = rng.uniform(0.0, height - h)
        out.append(LabeledBox(Box(x0, y0, x0 + w, y0 + h), int(rng.integers(1, n_classes + 1)), k))
    return out


def scene_features(targets: TargetSet, seed: int, n_classes: int = N_CLASSES,
                   n_features: int = N_FEATURES) -> np.ndarray:
    """Per-location features: bias, class one-hot, noisy log-distances, side-ratio cues, noise."""
    n = len(targets)
    n_info = 1 + n_classes + 4 + 2
    if n_features < n_info:
        raise ValueError(f"need at least {n_info} features")
    feats = np.zeros((n, n_features))
    pos = targets.class_label > 0
    feats[:, 0] = 1.0
    for level, sl in targets.level_slices.items():
        rng = np.random.default_rng([seed, 7919, level])
        m = sl.stop - sl.start
        noise = rng.standard_normal((m, n_features))
        p = pos[sl]
        block = feats[sl]
        block[p, 1 + targets.class_label[sl][p] - 1] = CLASS_GAIN
        reg = targets.regression[sl][p]
        ctr = targets.centerness[sl][p]
        logd = np.log(np.maximum(reg, DIST_FLOOR))
        block[p, 1 + n_classes:5 + n_classes] = LOG_GAIN * (logd - LOG_CENTER + REG_NOISE * ((1.0 - ctr) ** NOISE_POWER)[:, None] * noise[p, :4])
        block[p, 5 + n_classes] = RATIO_GAIN * (np.abs(logd[:, 0] - logd[:, 2]) - RATIO_CENTER)
        block[p, 6 + n_classes] = RATIO_GAIN * (np.abs(logd[:, 1] - logd[:, 3]) - RATIO_CENTER)
        block[:, n_info:] = FEATURE_NOISE * noise[:, n_info:]
        feats[sl] = block
    return feats


def generate_scene(seed: int, image_size=IMAGE_SIZE, cfg: Optional[FpnConfig] = None,
                   n_classes: int = N_CLASSES, n_features: int = N_FEATURES,
                   gts: Optional[Sequence[LabeledBox]] = None) -> SyntheticScene:
    """Deterministic synthetic scene; pass ``gts`` to override the sampled boxes."""
    cfg = cfg or FpnConfig(normalize_targets=True)
    if gts is None:
        rng = np.random.default_rng([seed, 104729])
        gts = _sample_boxes(rng, seed, image_size, n_classes)
    targets = build_targets(image_size, gts, cfg)
    return SyntheticScene(seed, tuple(image_size), list(gts), cfg, targets,
                          scene_features(targets, seed, n_classes, n_features))


@dataclass
class LinearHead:
    """Linear class / regression / center-ness branches plus per-level exp scales."""

    cls_weight: np.ndarray  # (C, D)
    reg_weight: np.ndarray  # (4, D)
    ctr_weight: np.ndarray  # (D,)
    scales: np.ndarray  # (n_levels,)

    @classmethod
    def init(cls, n_features: int = N_FEATURES, n_classes: int = N_CLASSES, n_levels: int = 5,
             seed: int = 0, prior: float = 0.01) -> "LinearHead":
        rng = np.random.default_rng([seed, 31337])
        cls_w = 0.01 * rng.standard_normal((n_classes, n_features))
        cls_w[:, 0] = -math.log((1 - prior) / prior)
        return cls(
            cls_weight=cls_w,
            reg_weight=0.01 * rng.standard_normal((4, n_features)),
            ctr_weight=0.01 * rng.standard_normal(n_features),
            scales=np.ones(n_levels),
        )

    def copy(self) -> "LinearHead":
        return LinearHead(self.cls_weight.copy(), self.reg_weight.copy(), self.ctr_weight.copy(), self.scales.copy())

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.cls_weight.ravel(), self.reg_weight.ravel(), self.ctr_weight, self.scales])

    def from_vector(self, theta: np.ndarray) -> "LinearHead":
        out = self.copy()
        k = 0
        for name in ("cls_weight", "reg_weight", "ctr_weight", "scales"):
            arr = getattr(out, name)
            arr[...] = theta[k:k + arr.size].reshape(arr.shape)
            k += arr.size
        return out

    def forward(self, features: np.ndarray, level_index: np.ndarray):
        """Class probs, raw regression, scaled exponent input, ltrb and center-ness prob."""
        cls_p = expit(features @ self.cls_weight.T)
        raw = features @ self.reg_weight.T
        scaled = self.scales[level_index][:, None] * raw
        ltrb = np.exp(np.minimum(scaled, EXP_CLAMP))
        ctr_p = expit(features @ self.ctr_weight)
        return cls_p, raw, scaled, ltrb, ctr_p


@dataclass
class _Batch:
    features: np.ndarray
    level_index: np.ndarray
    strides: np.ndarray
    class_label: np.ndarray
    regression: np.ndarray
    centerness: np.ndarray


def _stack(scenes: Sequence[SyntheticScene]) -> _Batch:
    return _Batch(
        features=np.concatenate([s.features for s in scenes]),
        level_index=np.concatenate([s.targets.level_index for s in scenes]),
        strides=np.concatenate([s.strides for s in scenes]),
        class_label=np.concatenate([s.targets.class_label for s in scenes]),
        regression=np.concatenate([s.targets.regression for s in scenes]),
        centerness=np.concatenate([s.targets.centerness for s in scenes]),
    )


def loss_and_grad(head: LinearHead, batch, options: LossOptions = LossOptions()):
    """Total loss over a batch and its gradient w.r.t. every head parameter.

    Predicted distances are compared with the targets in the targets' own
    units (stride-normalised when the scenes were built that way).
    """
    if isinstance(batch, (list, tuple)):
        batch = _stack(batch)
    cls_p, raw, scaled, ltrb, ctr_p = head.forward(batch.features, batch.level_index)
    report, grads = total_loss(batch, Predictions(cls_p, ltrb, ctr_p), options)
    g = grads.wrt_logits(cls_p, ctr_p)

    d_scaled = g.reg * ltrb * (scaled < EXP_CLAMP)
    s = head.scales[batch.level_index][:, None]
    d_scales = np.zeros_like(head.scales)
    np.add.at(d_scales, batch.level_index, (d_scaled * raw).sum(axis=1))
    grad = LinearHead(
        cls_weight=g.cls.T @ batch.features,
        reg_weight=(d_scaled * s).T @ batch.features,
        ctr_weight=g.ctr @ batch.features,
        scales=d_scales,
    )
    return report, grad


def gradient_check(head: LinearHead, scene, tolerance: float = 1e-5, n_params: int = 200,
                   step: float = 1e-6, seed: int = 0, options: LossOptions = LossOptions(),
                   corrupt: bool = False) -> GradCheckResult:
    """Central differences on a random subset of parameters against the analytic gradient.

    ``corrupt`` zeroes the analytic gradient (negative control).
    """
    scenes = scene if isinstance(scene, (list, tuple)) else [scene]
    batch = _stack(scenes)
    _, grad = loss_and_grad(head, batch, options)
    analytic = grad.to_vector()
    if corrupt:
        analytic = np.zeros_like(analytic)
    theta = head.to_vector()
    rng = np.random.default_rng(seed)
    idx = rng.choice(theta.size, size=min(n_params, theta.size), replace=False)
    numeric = np.empty(idx.size)
    for k, i in enumerate(idx):
        tp, tm = theta.copy(), theta.copy()
        tp[i] += step
        tm[i] -= step
        fp = loss_and_grad(head.from_vector(tp), batch, options)[0].total
        fm = loss_and_grad(head.from_vector(tm), batch, options)[0].total
        numeric[k] = (fp - fm) / (2 * step)
    err = float(relative_error(analytic[idx], numeric).max())
    return GradCheckResult(err <= tolerance, err, int(idx.size), tolerance)


@dataclass
class TrainReport:
    losses: list[LossReport]
    mean_best_iou: float = float("nan")
    rank_corr_before: float = float("nan")
    rank_corr_after: float = float("nan")
    gradcheck: Optional[GradCheckResult] = None

    @property
    def total_series(self) -> np.ndarray:
        return np.array([r.total for r in self.losses])

    def smoothed_series(self, window: int = 5) -> np.ndarray:
        """Trailing moving average of the total loss; the first ``window - 1`` epochs average what exists."""
        x = self.total_series
        c = np.cumsum(np.concatenate([[0.0], x]))
        lo = np.maximum(np.arange(1, x.size + 1) - window, 0)
        return (c[1:] - c[lo]) / (np.arange(1, x.size + 1) - lo)

    def rows(self) -> list[tuple]:
        return [(e, r.cls_loss, r.reg_loss, r.ctr_loss, r.total) for e, r in enumerate(self.losses)]

    def summary(self) -> dict:
        return {
            "epochs": len(self.losses),
            "initial_loss": self.losses[0].total if self.losses else None,
            "final_loss": self.losses[-1].total if self.losses else None,
            "mean_best_iou": self.mean_best_iou,
            "rank_corr_before": self.rank_corr_before,
            "rank_corr_after": self.rank_corr_after,
            "gradcheck_passed": None if self.gradcheck is None else self.gradcheck.passed,
            "gradcheck_max_rel_error": None if self.gradcheck is None else self.gradcheck.max_rel_error,
        }


def train(scenes: Sequence[SyntheticScene], head: LinearHead, epochs: int = 200,
          learning_rate: float = 0.05, options: LossOptions = LossOptions()) -> tuple[LinearHead, TrainReport]:
    """Full-batch gradient descent; the loss recorded for an epoch precedes its update."""
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    if learning_rate < 0:
        raise ValueError("learning_rate must be >= 0")
    batch = _stack(scenes)
    head = head.copy()
    theta = head.to_vector()
    losses = []
    for epoch in range(epochs):
        try:
            report, grad = loss_and_grad(head, batch, options)
        except ValueError as exc:
            # exp underflow yields zero-length boxes once the weights blow up
            raise TrainingDiverged(epoch) from exc
        if not math.isfinite(report.total):
            raise TrainingDiverged(epoch)
        losses.append(report)
        theta = theta - learning_rate * grad.to_vector()
        head = head.from_vector(theta)
        if epoch % 50 == 0:
            logger.info("epoch %d  loss %.5f", epoch, report.total)
    return head, TrainReport(losses)


def level_outputs(head: LinearHead, scene: SyntheticScene) -> dict[int, LevelOutput]:
    cls_p, raw, _, _, ctr_p = head.forward(scene.features, scene.targets.level_index)
    out = {}
    for level, sl in scene.targets.level_slices.items():
        shape = scene.targets.level_shapes[level]
        hw = (shape.height, shape.width)
        out[level] = LevelOutput(cls_p[sl].reshape(*hw, -1), raw[sl].reshape(*hw, 4), ctr_p[sl].reshape(hw))
    return out


def predict_scene(head: LinearHead, scene: SyntheticScene, options: InferenceOptions = InferenceOptions()):
    """Post-NMS candidate arrays for one scene."""
    cand = collect_candidates(level_outputs(head, scene), scene.image_size, scene.cfg,
                              {i: s for i, s in enumerate(head.scales)}, options)
    keep = nms_indices(cand.boxes, cand.final_scores, cand.class_ids, options.nms_threshold, options.per_class_nms)
    if options.max_detections is not None:
        keep = keep[: options.max_detections]
    return cand.subset(keep)


def mean_best_iou(head: LinearHead, scenes: Sequence[SyntheticScene],
                  options: InferenceOptions = InferenceOptions()) -> float:
    """Mean over GTs of the best IoU achieved by a same-class final detection (0 if none)."""
    best = []
    for scene in scenes:
        det = predict_scene(head, scene, options)
        for g in scene.gts:
            same = det.class_ids == g.class_id
            if not same.any():
                best.append(0.0)
                continue
            best.append(float(pairwise_iou(np.array([g.box.as_tuple()]), det.boxes[same]).max()))
    return float(np.mean(best)) if best else float("nan")


def fusion_effect(head: LinearHead, scenes: Sequence[SyntheticScene],
                  options: InferenceOptions = InferenceOptions()) -> tuple[float, float]:
    """Spearman correlation of score vs IoU over pre-NMS candidates, without and with fusion."""
    cls_scores, ctr, ious = [], [], []
    for scene in scenes:
        cand = collect_candidates(level_outputs(head, scene), scene.image_size, scene.cfg,
                                  {i: s for i, s in enumerate(head.scales)}, options)
        if len(cand) == 0:
            continue
        gt = np.array([g.box.as_tuple() for g in scene.gts])
        ious.append(pairwise_iou(cand.boxes, gt).max(axis=1))
        cls_scores.append(cand.cls_scores)
        ctr.append(cand.centerness)
    if not ious:
        return float("nan"), float("nan")
    x = np.concatenate(cls_scores)
    c = np.concatenate(ctr)
    y = np.concatenate(ious)
    before = spearmanr(x, y).statistic
    after = spearmanr(x * c, y).statistic
    return float(before), float(after)
