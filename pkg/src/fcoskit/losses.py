"""Loss kernels with closed-form gradients.

Each kernel accepts a single sample or a batch (leading axis) and returns the
summed loss together with its gradient with respect to the prediction
operand. :func:`total_loss` combines them into the normalised detection
objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .config import FocalParams, LossOptions

PROB_EPS = 1e-7


@dataclass(frozen=True)
class GradientBundle:
    """Gradients of a loss with respect to the network outputs.

    ``cls`` and ``ctr`` are taken with respect to probabilities, ``reg`` with
    respect to the (post-exp) ltrb distances. :meth:`wrt_logits` chains the
    probability gradients through the logistic function.
    """

    cls: Optional[np.ndarray] = None
    reg: Optional[np.ndarray] = None
    ctr: Optional[np.ndarray] = None

    def wrt_logits(self, class_probs: np.ndarray, centerness_probs: np.ndarray) -> "GradientBundle":
        cls = None if self.cls is None else self.cls * class_probs * (1 - class_probs)
        ctr = None if self.ctr is None else self.ctr * centerness_probs * (1 - centerness_probs)
        return GradientBundle(cls=cls, reg=self.reg, ctr=ctr)


@dataclass(frozen=True)
class LossReport:
    cls_loss: float
    reg_loss: float
    ctr_loss: float
    total: float
    n_pos: int
    reg_weight: float = 1.0

    def as_dict(self) -> dict:
        return {
            "cls": self.cls_loss,
            "reg": self.reg_loss,
            "ctr": self.ctr_loss,
            "total": self.total,
            "n_pos": self.n_pos,
        }


def _fsum(values: np.ndarray) -> float:
    # correctly rounded, hence independent of summation order
    return math.fsum(np.asarray(values, dtype=np.float64).ravel().tolist())


def _clamp(p):
    pc = np.clip(p, PROB_EPS, 1 - PROB_EPS)
    live = (p > PROB_EPS) & (p < 1 - PROB_EPS)
    return pc, live


def focal_terms(class_probs, labels, params: FocalParams = FocalParams()):
    """Element-wise focal loss terms and their derivatives w.r.t. the probabilities."""
    p = np.asarray(class_probs, dtype=np.float64)
    p2 = np.atleast_2d(p)
    lab = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    n, c = p2.shape
    if lab.shape != (n,):
        raise ValueError(f"expected {n} labels, got shape {lab.shape}")
    if (lab < 0).any() or (lab > c).any():
        raise ValueError(f"labels must lie in 0..{c}")
    onehot = lab[:, None] == np.arange(1, c + 1)[None, :]

    g, a = params.gamma, params.alpha
    pc, live = _clamp(p2)
    q = 1 - pc
    log_p, log_q = np.log(pc), np.log(q)
    pos_val = -a * q ** g * log_p
    neg_val = -(1 - a) * pc ** g * log_q
    # d/dp of the two branches; the gamma factor vanishes identically when gamma == 0
    if g == 0:
        pos_grad = -a / pc
        neg_grad = (1 - a) / q
    else:
        pos_grad = a * (g * q ** (g - 1) * log_p - q ** g / pc)
        neg_grad = -(1 - a) * (g * pc ** (g - 1) * log_q - pc ** g / q)
    val = np.where(onehot, pos_val, neg_val)
    grad = np.where(onehot, pos_grad, neg_grad) * live
    return val.reshape(p.shape), grad.reshape(p.shape)


def focal_loss(class_probs, label, params: FocalParams = FocalParams()):
    """Sum of ``C`` binary focal terms; ``label`` 0 means background.

    Returns ``(value, GradientBundle(cls=...))``.
    """
    val, grad = focal_terms(class_probs, label, params)
    return _fsum(val), GradientBundle(cls=grad)


def _check_regression(pred, target):
    if not np.all(np.isfinite(pred)) or np.any(pred <= 0):
        raise ValueError("predicted distances must be finite and > 0")
    # border locations legitimately carry a zero distance
    if not np.all(np.isfinite(target)) or np.any(target < 0):
        raise ValueError("target distances must be finite and >= 0")
    if np.any(target[:, 0] + target[:, 2] <= 0) or np.any(target[:, 1] + target[:, 3] <= 0):
        raise ValueError("target boxes must have positive width and height")


def iou_terms(pred, target, giou: bool = False):
    """Row-wise ``-ln IoU`` (plus the optional enclosing-box penalty) and gradients.

    Both operands are ltrb distances measured from the same point, so the
    boxes overlap by construction. Where ``pred == target`` in a component
    the target branch of ``min``/``max`` is taken, contributing no gradient.
    """
    p = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    t = np.atleast_2d(np.asarray(target, dtype=np.float64))
    if p.shape != t.shape or p.shape[-1] != 4:
        raise ValueError(f"pred and target must both be (N, 4), got {p.shape} and {t.shape}")
    _check_regression(p, t)
    l, tp, r, b = p.T
    ls, ts, rs, bs = t.T

    iw = np.minimum(l, ls) + np.minimum(r, rs)
    ih = np.minimum(tp, ts) + np.minimum(b, bs)
    inter = iw * ih
    pw, ph = l + r, tp + b
    area_p = pw * ph
    area_t = (ls + rs) * (ts + bs)
    union = area_p + area_t - inter
    val = np.log(union) - np.log(inter)

    # d(inter)/d(pred): only where the prediction is the active min
    d_inter = np.stack([ih * (l < ls), iw * (tp < ts), ih * (r < rs), iw * (b < bs)], axis=1)
    d_area = np.stack([ph, pw, ph, pw], axis=1)
    d_union = d_area - d_inter
    grad = d_union / union[:, None] - d_inter / inter[:, None]

    if giou:
        cw = np.maximum(l, ls) + np.maximum(r, rs)
        ch = np.maximum(tp, ts) + np.maximum(b, bs)
        enclose = cw * ch
        val = val + (enclose - union) / enclose
        d_enc = np.stack([ch * (l > ls), cw * (tp > ts), ch * (r > rs), cw * (b > bs)], axis=1)
        # d/dx (1 - U/C) = -(U' C - U C') / C^2
        grad = grad - (d_union * enclose[:, None] - union[:, None] * d_enc) / (enclose ** 2)[:, None]
    return val, grad.reshape(np.shape(pred))


def iou_loss(pred, target):
    """``-ln IoU`` between predicted and target ltrb distances."""
    val, grad = iou_terms(pred, target)
    return _fsum(val), GradientBundle(reg=grad)


def giou_penalty(pred, target):
    """``(C - U) / C`` for the enclosing box ``C`` and union ``U`` of the two boxes."""
    p = np.atleast_2d(np.asarray(pred, dtype=np.float64))
    t = np.atleast_2d(np.asarray(target, dtype=np.float64))
    v0, g0 = iou_terms(p, t, giou=False)
    v1, g1 = iou_terms(p, t, giou=True)
    return _fsum(v1 - v0), GradientBundle(reg=(g1 - g0).reshape(np.shape(pred)))


def bce_terms(prob, target):
    p = np.asarray(prob, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    pc, live = _clamp(p)
    val = -t * np.log(pc) - (1 - t) * np.log(1 - pc)
    grad = (-t / pc + (1 - t) / (1 - pc)) * live
    return val, grad


def centerness_bce(prob, target):
    """Binary cross-entropy between predicted and target center-ness."""
    val, grad = bce_terms(prob, target)
    return _fsum(val), GradientBundle(ctr=grad)


@dataclass
class Predictions:
    """Network outputs aligned one-to-one with a :class:`~fcoskit.assignment.TargetSet`."""

    class_probs: np.ndarray  # (N, C)
    regression: np.ndarray  # (N, 4), positive distances in target units
    centerness: np.ndarray  # (N,)

    def __len__(self) -> int:
        return len(self.class_probs)


def total_loss(targets, preds: Predictions, options: LossOptions = LossOptions(),
               reg_weight: Optional[float] = None):
    """Normalised detection loss over all locations.

    Classification is summed over every location; regression and
    center-ness only over positives. All three are divided by the number of
    positives (or by 1 when there are none).

    ``targets`` may be a ``TargetSet`` or anything exposing ``class_label``,
    ``regression`` and ``centerness`` arrays. Returns ``(LossReport, GradientBundle)``.
    """
    lam = options.reg_weight if reg_weight is None else reg_weight
    labels = np.asarray(targets.class_label)
    n = len(labels)
    if len(preds.class_probs) != n or len(preds.regression) != n or len(preds.centerness) != n:
        raise ValueError(
            f"predictions ({len(preds.class_probs)}, {len(preds.regression)}, "
            f"{len(preds.centerness)}) misaligned with {n} targets"
        )
    pos = labels > 0
    n_pos = int(pos.sum())
    norm = float(max(n_pos, 1))

    cls_val, cls_grad = focal_terms(preds.class_probs, labels, options.focal)
    cls_loss = _fsum(cls_val) / norm

    reg_grad = np.zeros_like(preds.regression, dtype=np.float64)
    ctr_grad = np.zeros(n, dtype=np.float64)
    reg_loss = ctr_loss = 0.0
    if n_pos:
        tgt_reg = np.asarray(targets.regression)[pos]
        r_val, r_grad = iou_terms(preds.regression[pos], tgt_reg, giou=options.giou)
        reg_loss = _fsum(r_val) / norm
        reg_grad[pos] = lam * r_grad / norm
        if options.use_centerness:
            c_val, c_grad = bce_terms(preds.centerness[pos], np.asarray(targets.centerness)[pos])
            ctr_loss = _fsum(c_val) / norm
            ctr_grad[pos] = c_grad / norm

    report = LossReport(
        cls_loss=cls_loss,
        reg_loss=reg_loss,
        ctr_loss=ctr_loss,
        total=cls_loss + lam * reg_loss + ctr_loss,
        n_pos=n_pos,
        reg_weight=lam,
    )
    return report, GradientBundle(cls=cls_grad / norm, reg=reg_grad, ctr=ctr_grad)
