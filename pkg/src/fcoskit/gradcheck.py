"""Central finite-difference checks for the closed-form loss gradients."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .config import FocalParams
from .losses import bce_terms, focal_terms, iou_terms

STEP = 1e-6


@dataclass
class GradCheckResult:
    passed: bool
    max_rel_error: float
    n_checked: int
    tolerance: float
    name: str = ""


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``; the floor turns near-zero entries into an absolute test."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def rowwise_check(fn: Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]], x: np.ndarray,
                  tolerance: float = 1e-5, step: float = STEP, corrupt: bool = False,
                  name: str = "") -> GradCheckResult:
    """Check ``fn(x) -> (values, grad)`` where row ``i`` of ``values`` depends only on row ``i`` of ``x``.

    Element-wise kernels (``values`` shaped like ``x``) are handled too.
    Each column is perturbed for all rows at once.
    """
    x = np.asarray(x, dtype=np.float64)
    x2 = x.reshape(len(x), -1)
    _, grad = fn(x)
    analytic = np.asarray(grad, dtype=np.float64).reshape(x2.shape)
    if corrupt:
        analytic = np.zeros_like(analytic)
    numeric = np.empty_like(x2)
    for j in range(x2.shape[1]):
        xp, xm = x2.copy(), x2.copy()
        xp[:, j] += step
        xm[:, j] -= step
        vp = np.asarray(fn(xp.reshape(x.shape))[0], dtype=np.float64).reshape(len(x), -1)
        vm = np.asarray(fn(xm.reshape(x.shape))[0], dtype=np.float64).reshape(len(x), -1)
        # element-wise kernels: only the perturbed column changes
        col = j if vp.shape[1] == x2.shape[1] else slice(None)
        numeric[:, j] = ((vp[:, col] - vm[:, col]) / (2 * step)).reshape(len(x), -1).sum(axis=1)
    err = float(relative_error(analytic, numeric).max())
    return GradCheckResult(err <= tolerance, err, int(x2.shape[0]), tolerance, name)


def _distances(rng, n):
    # keep prediction and target components apart so no min/max kink lies within one step
    target = rng.uniform(0.5, 50.0, (n, 4))
    ratio = np.exp(rng.uniform(-1.5, 1.5, (n, 4)))
    ratio = np.where(np.abs(ratio - 1) < 1e-3, 1.01, ratio)
    return target * ratio, target


def kernel_suite(n_points: int = 1000, seed: int = 0, tolerance: float = 1e-5,
                 corrupt: bool = False) -> list[GradCheckResult]:
    """Check focal, IoU, GIoU and BCE kernels on ``n_points`` random interior points each."""
    rng = np.random.default_rng(seed)
    out = []
    for gamma in (2.0, 0.0):
        probs = rng.uniform(0.01, 0.99, (n_points, 3))
        labels = rng.integers(0, 4, n_points)
        params = FocalParams(gamma=gamma)
        out.append(rowwise_check(lambda p: focal_terms(p, labels, params), probs, tolerance,
                                 corrupt=corrupt, name=f"focal(gamma={gamma:g})"))
    pred, target = _distances(rng, n_points)
    for giou in (False, True):
        out.append(rowwise_check(lambda p: iou_terms(p, target, giou=giou), pred, tolerance,
                                 corrupt=corrupt, name="giou" if giou else "iou"))
    prob = rng.uniform(0.01, 0.99, n_points)
    tgt = rng.uniform(0.0, 1.0, n_points)
    out.append(rowwise_check(lambda p: bce_terms(p, tgt), prob, tolerance, corrupt=corrupt, name="bce"))
    return out
