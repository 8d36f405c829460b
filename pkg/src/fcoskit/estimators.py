"""scikit-learn style wrappers around target encoding, post-processing and the toy head.

Inputs are lists rather than 2-D arrays: a *scene* is ``((width, height), gts)``
and the validation helpers below play the role of ``check_array``.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_is_fitted

from . import toy
from .assignment import TargetSet, build_targets
from .config import FpnConfig, InferenceOptions, LossOptions
from .geometry import LabeledBox
from .inference import Detection, LevelOutput, run_inference


def check_scenes(X) -> list[tuple[tuple[int, int], list[LabeledBox]]]:
    """Validate a list of ``((width, height), gts)`` pairs."""
    out = []
    for k, item in enumerate(X):
        try:
            size, gts = item
            width, height = (int(v) for v in size)
        except (TypeError, ValueError) as exc:
            raise ValueError(f"scene {k}: expected ((width, height), gts)") from exc
        if width < 1 or height < 1:
            raise ValueError(f"scene {k}: image size must be positive, got {size}")
        gts = list(gts)
        for g in gts:
            if not isinstance(g, LabeledBox):
                raise TypeError(f"scene {k}: ground truths must be LabeledBox, got {type(g).__name__}")
        out.append(((width, height), gts))
    if not out:
        raise ValueError("at least one scene is required")
    return out


def check_level_outputs(X) -> list[tuple[dict[int, LevelOutput], tuple[int, int]]]:
    """Validate a list of ``(outputs_by_level, (width, height))`` pairs."""
    out = []
    for k, item in enumerate(X):
        try:
            outputs, size = item
        except (TypeError, ValueError) as exc:
            raise ValueError(f"item {k}: expected (outputs, (width, height))") from exc
        for level, lo in outputs.items():
            if not isinstance(lo, LevelOutput):
                raise TypeError(f"item {k}, level {level}: expected LevelOutput")
            if np.shape(lo.regression)[:2] != np.shape(lo.class_probs)[:2] or np.shape(lo.regression)[-1] != 4:
                raise ValueError(f"item {k}, level {level}: regression must be (H, W, 4) aligned with class_probs")
        out.append((dict(outputs), (int(size[0]), int(size[1]))))
    return out


class FCOSTargetEncoder(TransformerMixin, BaseEstimator):
    """Encode ground-truth boxes into per-location targets.

    Parameters
    ----------
    center_sampling : bool
        Restrict positives to a disc of ``radius_factor * stride`` around box centres.
    radius_factor : float
    normalize_targets : bool
        Divide regression targets by the level stride.
    single_level : str or None
        Put every object on one level (``"P4"`` reproduces the no-FPN setting).
    include_crowd : bool
        Treat ``is_crowd`` boxes as ordinary ground truth.
    """

    def __init__(self, center_sampling: bool = False, radius_factor: float = 1.5,
                 normalize_targets: bool = False, single_level: Optional[str] = None,
                 include_crowd: bool = False):
        self.center_sampling = center_sampling
        self.radius_factor = radius_factor
        self.normalize_targets = normalize_targets
        self.single_level = single_level
        self.include_crowd = include_crowd

    def fit(self, X=None, y=None):
        self.config_ = FpnConfig(center_sampling=self.center_sampling, radius_factor=self.radius_factor,
                                 normalize_targets=self.normalize_targets, single_level=self.single_level)
        return self

    def transform(self, X) -> list[TargetSet]:
        check_is_fitted(self, "config_")
        return [build_targets(size, gts, self.config_, self.include_crowd) for size, gts in check_scenes(X)]


class FCOSPostprocessor(BaseEstimator):
    """Threshold, decode, fuse and suppress raw head outputs. Stateless; ``fit`` only validates."""

    def __init__(self, score_threshold: float = 0.05, nms_threshold: float = 0.5,
                 per_class_nms: bool = True, pre_nms_top_k: Optional[int] = 1000,
                 fuse_centerness: bool = True, normalize_targets: bool = False):
        self.score_threshold = score_threshold
        self.nms_threshold = nms_threshold
        self.per_class_nms = per_class_nms
        self.pre_nms_top_k = pre_nms_top_k
        self.fuse_centerness = fuse_centerness
        self.normalize_targets = normalize_targets

    def fit(self, X=None, y=None):
        self.options_ = InferenceOptions(
            score_threshold=self.score_threshold, nms_threshold=self.nms_threshold,
            per_class_nms=self.per_class_nms, pre_nms_top_k=self.pre_nms_top_k,
            fuse_centerness=self.fuse_centerness,
        )
        self.config_ = FpnConfig(normalize_targets=self.normalize_targets)
        return self

    def predict(self, X, scales=None) -> list[list[Detection]]:
        check_is_fitted(self, "options_")
        return [run_inference(outputs, size, self.config_, scales, self.options_, image_id=k)
                for k, (outputs, size) in enumerate(check_level_outputs(X))]


class LinearFCOSHead(BaseEstimator):
    """Linear per-location head fitted by full-batch gradient descent on synthetic scenes.

    ``fit``, ``predict`` and ``score`` take a list of :class:`~fcoskit.toy.SyntheticScene`.
    ``score`` is the mean best IoU per ground-truth box.
    """

    def __init__(self, epochs: int = 200, learning_rate: float = 0.05, seed: int = 0,
                 reg_weight: float = 1.0, giou: bool = False):
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.seed = seed
        self.reg_weight = reg_weight
        self.giou = giou

    @staticmethod
    def _check(X) -> Sequence[toy.SyntheticScene]:
        X = list(X)
        if not X or not all(isinstance(s, toy.SyntheticScene) for s in X):
            raise TypeError("expected a non-empty list of SyntheticScene")
        dims = {s.features.shape[1] for s in X}
        if len(dims) != 1:
            raise ValueError(f"scenes disagree on feature width: {sorted(dims)}")
        return X

    def fit(self, X, y=None):
        X = self._check(X)
        n_classes = int(max(max((g.class_id for g in s.gts), default=1) for s in X))
        head = toy.LinearHead.init(n_features=X[0].features.shape[1],
                                   n_classes=max(n_classes, toy.N_CLASSES),
                                   n_levels=len(X[0].cfg.levels), seed=self.seed)
        options = LossOptions(reg_weight=self.reg_weight, giou=self.giou)
        self.head_, self.report_ = toy.train(X, head, self.epochs, self.learning_rate, options)
        return self

    def predict(self, X) -> list[list[Detection]]:
        check_is_fitted(self, "head_")
        return [toy.predict_scene(self.head_, s).to_detections(s.seed) for s in self._check(X)]

    def score(self, X, y=None) -> float:
        check_is_fitted(self, "head_")
        return toy.mean_best_iou(self.head_, self._check(X))


__all__ = [
    "FCOSPostprocessor",
    "FCOSTargetEncoder",
    "LinearFCOSHead",
    "NotFittedError",
    "check_level_outputs",
    "check_scenes",
]
