import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fcoskit.config import FocalParams, LossOptions
from fcoskit.gradcheck import kernel_suite, rowwise_check
from fcoskit.losses import (
    PROB_EPS,
    Predictions,
    bce_terms,
    centerness_bce,
    focal_loss,
    focal_terms,
    giou_penalty,
    iou_loss,
    iou_terms,
    total_loss,
)

dist = st.floats(0.01, 100.0)
prob = st.floats(0.001, 0.999)
ltrb = st.tuples(dist, dist, dist, dist).map(np.array)


class TestFocal:
    def test_positive_half(self):
        val, _ = focal_loss([0.5], 1)
        assert val == pytest.approx(0.25 * 0.25 * math.log(2), abs=1e-6)
        assert val == pytest.approx(0.043322, abs=1e-6)

    def test_perfect_prediction(self):
        val, grad = focal_loss([1 - 1e-9, 1e-9, 1e-9], 1)
        assert val < 1e-12
        assert np.all(grad.cls == 0)  # clamped: no gradient

    def test_gamma_zero_is_weighted_cross_entropy(self):
        p = np.array([0.3, 0.6, 0.9])
        val, _ = focal_loss(p, 2, FocalParams(gamma=0.0, alpha=0.25))
        expected = -0.75 * math.log(0.7) - 0.25 * math.log(0.6) - 0.75 * math.log(0.1)
        assert val == pytest.approx(expected, rel=1e-12)

    def test_label_out_of_range(self):
        with pytest.raises(ValueError):
            focal_loss([0.2, 0.3], 3)
        with pytest.raises(ValueError):
            focal_loss([0.2, 0.3], -1)

    @given(prob, prob, st.floats(1e-4, 0.2))
    def test_monotone(self, p_true, p_false, d):
        lo, _ = focal_loss([p_true, p_false], 1)
        up_true, _ = focal_loss([min(p_true + d, 1 - PROB_EPS), p_false], 1)
        up_false, _ = focal_loss([p_true, min(p_false + d, 1 - PROB_EPS)], 1)
        assert up_true <= lo + 1e-15
        assert up_false >= lo - 1e-15

    def test_clamped_entries_have_zero_gradient(self):
        _, grad = focal_terms(np.array([[0.0, 1.0, 0.5]]), np.array([1]))
        assert grad[0, 0] == 0 and grad[0, 1] == 0 and grad[0, 2] != 0


class TestIoULoss:
    def test_examples(self):
        assert iou_loss([3, 4, 5, 6], [3, 4, 5, 6])[0] == 0.0
        assert iou_loss([10, 10, 10, 10], [5, 5, 5, 5])[0] == pytest.approx(math.log(4), abs=1e-9)

    def test_decreases_toward_target(self):
        target = np.array([5.0, 8.0, 3.0, 12.0])
        vals = [iou_loss(target * k, target)[0] for k in np.linspace(3.0, 1.0, 50)]
        assert all(b < a for a, b in zip(vals, vals[1:]))

    def test_rejects_non_positive_prediction(self):
        with pytest.raises(ValueError):
            iou_loss([0, 1, 1, 1], [1, 1, 1, 1])
        with pytest.raises(ValueError):
            iou_loss([1, 1, 1, 1], [-1, 1, 1, 1])
        with pytest.raises(ValueError):
            iou_loss([1, 1, 1, 1], [0, 1, 0, 1])

    def test_border_target_accepted(self):
        val, _ = iou_loss([1, 1, 1, 1], [0, 1, 2, 1])
        assert math.isfinite(val)

    @given(ltrb, ltrb)
    def test_non_negative_and_scale_invariant(self, pred, target):
        val, _ = iou_loss(pred, target)
        assert val >= -1e-12
        assert iou_loss(pred * 3.7, target * 3.7)[0] == pytest.approx(val, abs=1e-9)

    @given(ltrb)
    def test_zero_only_at_target(self, t):
        assert iou_loss(t, t)[0] == pytest.approx(0.0, abs=1e-12)
        assert iou_loss(t * 1.01, t)[0] > 0

    def test_tie_takes_target_branch(self):
        # l equals the target: the intersection derivative is zero for that side
        _, g = iou_terms(np.array([[5.0, 2.0, 2.0, 2.0]]), np.array([[5.0, 3.0, 3.0, 3.0]]))
        pw, ph = 7.0, 4.0
        union = pw * ph + 8.0 * 6.0 - 7.0 * 4.0
        assert g[0, 0] == pytest.approx(ph / union)


class TestGIoU:
    def test_examples(self):
        assert giou_penalty([2, 3, 4, 5], [2, 3, 4, 5])[0] == 0.0
        assert giou_penalty([10, 10, 10, 10], [5, 5, 5, 5])[0] == pytest.approx(0.0, abs=1e-12)
        assert giou_penalty([10, 1e-4, 10, 10], [1e-4, 10, 10, 10])[0] > 0

    @given(ltrb, ltrb)
    def test_penalty_in_unit_interval(self, pred, target):
        val, _ = giou_penalty(pred, target)
        assert -1e-12 <= val < 1

    def test_penalty_gradient(self):
        rng = np.random.default_rng(5)
        t = rng.uniform(1, 20, (500, 4))
        p = t * np.exp(rng.uniform(-1, 1, (500, 4)))

        def fn(x):
            v1, g1 = iou_terms(x, t, giou=True)
            v0, g0 = iou_terms(x, t)
            return v1 - v0, g1 - g0

        assert rowwise_check(fn, p).passed


class TestBCE:
    def test_examples(self):
        assert centerness_bce(0.5, 0.5)[0] == pytest.approx(math.log(2), abs=1e-6)
        assert centerness_bce(1 - 1e-9, 1.0)[0] == pytest.approx(0.0, abs=1e-6)

    @given(st.floats(0.0, 1.0))
    def test_minimised_at_target(self, t):
        grid = np.linspace(0.001, 0.999, 999)
        vals, _ = bce_terms(grid, np.full_like(grid, t))
        best = grid[np.argmin(vals)]
        assert abs(best - min(max(t, 0.001), 0.999)) <= 1e-3 + 1e-12


class TestGradientSuite:
    def test_all_kernels_pass(self):
        for res in kernel_suite(n_points=1000, seed=1):
            assert res.passed, res
            assert res.n_checked >= 1000

    def test_negative_control_fails(self):
        assert not any(r.passed for r in kernel_suite(n_points=100, seed=2, corrupt=True))


def _targets(labels, reg, ctr):
    return SimpleNamespace(class_label=np.asarray(labels), regression=np.asarray(reg, dtype=float),
                           centerness=np.asarray(ctr, dtype=float))


class TestTotalLoss:
    def test_single_positive_is_sum_of_kernels(self):
        t = _targets([2], [[3, 4, 5, 6]], [0.4])
        p = Predictions(np.array([[0.2, 0.7]]), np.array([[2.0, 5.0, 5.0, 7.0]]), np.array([0.3]))
        rep, _ = total_loss(t, p)
        expected = (focal_loss(p.class_probs[0], 2)[0] + iou_loss(p.regression[0], t.regression[0])[0]
                    + centerness_bce(0.3, 0.4)[0])
        assert rep.total == pytest.approx(expected, rel=1e-12)
        assert rep.n_pos == 1

    def test_empty_image_normaliser_is_one(self):
        t = _targets([0, 0, 0], np.full((3, 4), np.nan), [np.nan] * 3)
        p = Predictions(np.full((3, 2), 0.1), np.ones((3, 4)), np.full(3, 0.5))
        rep, grads = total_loss(t, p)
        assert rep.reg_loss == 0.0 and rep.ctr_loss == 0.0
        assert rep.total == pytest.approx(focal_terms(p.class_probs, [0, 0, 0])[0].sum())
        assert np.all(grads.reg == 0) and np.all(grads.ctr == 0)

    def test_perfect_predictions(self):
        t = _targets([1, 0], [[2, 2, 2, 2], [np.nan] * 4], [1.0, np.nan])
        eps = 1e-9
        p = Predictions(np.array([[1 - eps], [eps]]), np.array([[2.0, 2, 2, 2], [1, 1, 1, 1]]), np.array([1 - eps, 0.5]))
        assert total_loss(t, p)[0].total < 1e-6

    def test_misaligned_rejected(self):
        t = _targets([1, 0], np.ones((2, 4)), [1, 1])
        with pytest.raises(ValueError):
            total_loss(t, Predictions(np.full((3, 1), 0.5), np.ones((3, 4)), np.full(3, 0.5)))

    def test_lambda_and_centerness_switch(self):
        t = _targets([1], [[1, 2, 3, 4]], [0.5])
        p = Predictions(np.array([[0.4]]), np.array([[2.0, 2, 2, 2]]), np.array([0.2]))
        r1, _ = total_loss(t, p, LossOptions(reg_weight=2.0))
        assert r1.total == pytest.approx(r1.cls_loss + 2 * r1.reg_loss + r1.ctr_loss)
        r2, _ = total_loss(t, p, LossOptions(use_centerness=False))
        assert r2.ctr_loss == 0.0

    def test_permutation_invariant(self):
        rng = np.random.default_rng(3)
        n = 400
        labels = rng.integers(0, 4, n) * (rng.random(n) < 0.3)
        reg = rng.uniform(0.5, 30, (n, 4))
        ctr = rng.uniform(0, 1, n)
        p = Predictions(rng.uniform(0.01, 0.99, (n, 3)), rng.uniform(0.5, 30, (n, 4)), rng.uniform(0.01, 0.99, n))
        base, _ = total_loss(_targets(labels, reg, ctr), p)
        perm = rng.permutation(n)
        shuffled, _ = total_loss(_targets(labels[perm], reg[perm], ctr[perm]),
                                 Predictions(p.class_probs[perm], p.regression[perm], p.centerness[perm]))
        assert shuffled.total == base.total
