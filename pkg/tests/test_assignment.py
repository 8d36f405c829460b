import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from fcoskit.assignment import (
    ambiguity_counts,
    ambiguity_stats,
    assign_level,
    build_targets,
    center_sampling_region,
    centerness_target,
    encode_targets,
    grid_shape,
    map_location,
)
from fcoskit.config import FpnConfig
from fcoskit.geometry import Box, LabeledBox
from oracles import assign_oracle

SMALL_LEVELS = (("P3", 8), ("P4", 16), ("P5", 32))
SMALL_RANGES = (0.0, 12.0, 24.0, math.inf)


def random_scene(rng, max_size=64, max_boxes=6, integer=False):
    width, height = (int(v) for v in rng.integers(8, max_size + 1, 2))
    gts = []
    for k in range(int(rng.integers(0, max_boxes + 1))):
        if integer:
            x0, x1 = sorted(rng.integers(0, width + 1, 2))
            y0, y1 = sorted(rng.integers(0, height + 1, 2))
        else:
            x0, x1 = sorted(rng.uniform(0, width, 2))
            y0, y1 = sorted(rng.uniform(0, height, 2))
        gts.append(LabeledBox(Box(float(x0), float(y0), float(x1), float(y1)), int(rng.integers(1, 4)), k,
                              is_crowd=bool(rng.random() < 0.1)))
    return (width, height), gts


class TestMapLocation:
    @pytest.mark.parametrize("s, xy, expected", [(8, (0, 0), (4, 4)), (16, (2, 3), (40, 56)), (128, (1, 1), (192, 192))])
    def test_examples(self, s, xy, expected):
        assert map_location(s, *xy) == expected

    @given(st.sampled_from([1, 2, 8, 16, 128]), st.integers(0, 500), st.integers(0, 500))
    def test_inside_own_cell(self, s, gx, gy):
        x, y = map_location(s, gx, gy)
        assert gx * s <= x < (gx + 1) * s and gy * s <= y < (gy + 1) * s


def test_grid_shape_uses_ceil():
    g = grid_shape(800, 1025, 128)
    assert (g.width, g.height) == (7, 9)
    assert (grid_shape(1, 1, 128).width, grid_shape(1, 1, 128).height) == (1, 1)


class TestEncode:
    def test_examples(self):
        assert encode_targets(30, 40, Box(0, 0, 100, 100)) == (30, 40, 70, 60)
        assert encode_targets(5, 5, Box(0, 0, 10, 10)) == (5, 5, 5, 5)
        assert encode_targets(0, 0, Box(0, 0, 100, 50)) == (0, 0, 100, 50)

    def test_outside_rejected(self):
        with pytest.raises(ValueError):
            encode_targets(101, 5, Box(0, 0, 100, 100))


class TestCenterness:
    def test_examples(self):
        assert centerness_target(7, 7, 7, 7) == 1.0
        assert centerness_target(0, 3, 4, 5) == 0.0
        assert centerness_target(30, 40, 70, 60) == pytest.approx(0.534522, abs=1e-6)
        assert centerness_target(0, 0, 0, 0) == 0.0

    @given(*[st.floats(0.01, 1e3)] * 4, st.floats(0.01, 100))
    def test_invariances(self, l, t, r, b, k):
        c = centerness_target(l, t, r, b)
        assert 0.0 <= c <= 1.0
        assert centerness_target(r, t, l, b) == pytest.approx(c, rel=1e-12)
        assert centerness_target(l, b, r, t) == pytest.approx(c, rel=1e-12)
        assert centerness_target(k * l, k * t, k * r, k * b) == pytest.approx(c, rel=1e-9)

    @given(st.floats(0.01, 100), st.floats(0.01, 100))
    def test_one_iff_centred(self, a, b):
        assert centerness_target(a, b, a, b) == pytest.approx(1.0)
        if abs(a - b) > 1e-6:
            assert centerness_target(a, b, b, a) < 1.0


class TestAssignLevel:
    @pytest.mark.parametrize("m, level", [(70, 1), (600, 4), (64, 0), (64.0001, 1), (512, 3), (1e9, 4)])
    def test_examples(self, m, level):
        assert assign_level((m, 1, 1, 1), FpnConfig()) == level

    def test_zero_is_unassigned(self):
        assert assign_level((0, 0, 0, 0), FpnConfig()) is None

    @given(st.floats(1e-6, 1e5))
    def test_exactly_one_level(self, m):
        cfg = FpnConfig()
        hits = [s.index for s in cfg.active_levels() if s.lower < m <= s.upper]
        assert hits == [assign_level((m, 0, 0, 0), cfg)]


class TestCenterSampling:
    def test_examples(self):
        assert center_sampling_region(Box(0, 0, 100, 100), 8, 1.5).as_tuple() == (38, 38, 62, 62)
        assert center_sampling_region(Box(0, 0, 100, 100), 8, 1e6).as_tuple() == (0, 0, 100, 100)
        assert center_sampling_region(Box(5, 5, 5, 5), 8, 1.5).as_tuple() == (5, 5, 5, 5)

    def test_never_adds_positives(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            size, gts = random_scene(rng, max_size=256)
            base = build_targets(size, gts, FpnConfig()).positive
            cs = build_targets(size, gts, FpnConfig(center_sampling=True)).positive
            assert not np.any(cs & ~base)


class TestBuildTargets:
    def test_full_image_box_single_level(self):
        ts = build_targets((64, 48), [LabeledBox(Box(0, 0, 64, 48), 3)], FpnConfig.no_fpn())
        assert len(ts) == 4 * 3
        assert np.all(ts.class_label == 3)

    def test_empty_gt_list(self):
        ts = build_targets((100, 60), [], FpnConfig())
        assert ts.n_pos == 0
        assert np.all(np.isnan(ts.regression))
        assert len(ts) == sum(grid_shape(100, 60, s).width * grid_shape(100, 60, s).height for s in (8, 16, 32, 64, 128))

    def test_nested_boxes_cross_class(self):
        big = LabeledBox(Box(0, 0, 64, 64), 1, 0)
        small = LabeledBox(Box(16, 16, 48, 48), 2, 1)
        ts = build_targets((64, 64), [big, small], FpnConfig.no_fpn())
        inner = (ts.image_x >= 16) & (ts.image_x <= 48) & (ts.image_y >= 16) & (ts.image_y <= 48)
        assert np.all(ts.class_label[inner] == 2)
        assert np.all(ts.source[inner] == 1)
        assert np.all(ts.ambiguous_cross_class[inner])
        assert not np.any(ts.is_ambiguous[~inner])

    def test_every_location_once(self):
        ts = build_targets((200, 90), [LabeledBox(Box(10, 10, 150, 80), 1)])
        keys = set(zip(ts.level_index.tolist(), ts.grid_x.tolist(), ts.grid_y.tolist()))
        assert len(keys) == len(ts)

    def test_zero_area_skipped(self, caplog):
        ts = build_targets((64, 64), [LabeledBox(Box(5, 5, 5, 30), 1)], FpnConfig())
        assert ts.n_pos == 0 and ts.n_skipped == 1

    def test_crowd_excluded_by_default(self):
        g = LabeledBox(Box(0, 0, 64, 64), 1, is_crowd=True)
        assert build_targets((64, 64), [g]).n_pos == 0
        assert build_targets((64, 64), [g], include_crowd=True).n_pos > 0

    def test_normalized_targets_divide_by_stride(self):
        g = [LabeledBox(Box(3, 5, 120, 90), 1)]
        raw = build_targets((128, 128), g, FpnConfig())
        norm = build_targets((128, 128), g, FpnConfig(normalize_targets=True))
        s = np.array([raw.strides[i] for i in raw.level_index])
        p = raw.positive
        np.testing.assert_allclose(norm.regression[p], raw.regression[p] / s[p][:, None])

    def test_index_of_and_records(self):
        ts = build_targets((50, 40), [LabeledBox(Box(0, 0, 30, 30), 2)], FpnConfig())
        for rec in ts.positives():
            row = ts.index_of(rec.level_index, rec.grid_x, rec.grid_y)
            assert ts.record(row) == rec
            assert rec.regression is not None and min(rec.regression) >= 0

    @pytest.mark.parametrize("variant", ["fpn", "single", "center"])
    def test_brute_force_oracle_200_scenes(self, variant):
        rng = np.random.default_rng({"fpn": 1, "single": 2, "center": 3}[variant])
        cfg = {
            "fpn": FpnConfig(levels=SMALL_LEVELS, range_thresholds=SMALL_RANGES),
            "single": FpnConfig(levels=SMALL_LEVELS, range_thresholds=SMALL_RANGES, single_level="P4"),
            "center": FpnConfig(levels=SMALL_LEVELS, range_thresholds=SMALL_RANGES, center_sampling=True,
                                radius_factor=0.75),
        }[variant]
        for k in range(200):
            size, gts = random_scene(rng, integer=(k % 2 == 0))
            ts = build_targets(size, gts, cfg)
            expected = assign_oracle(size, gts, SMALL_LEVELS, SMALL_RANGES, cfg.single_level,
                                     cfg.center_sampling, cfg.radius_factor)
            got = {}
            for i in np.flatnonzero(ts.positive):
                key = (int(ts.level_index[i]), int(ts.grid_x[i]), int(ts.grid_y[i]))
                got[key] = (int(ts.class_label[i]), int(ts.source[i]), tuple(ts.regression[i]),
                            bool(ts.is_ambiguous[i]), bool(ts.ambiguous_cross_class[i]))
            assert got.keys() == expected.keys()
            for key, val in expected.items():
                assert got[key][:2] == val[:2]
                assert got[key][2] == pytest.approx(val[2], abs=1e-9)
                assert got[key][3:] == val[3:]


class TestAmbiguity:
    def test_disjoint_boxes(self):
        gts = [LabeledBox(Box(0, 0, 30, 30), 1, 0), LabeledBox(Box(60, 60, 90, 90), 2, 1)]
        assert ambiguity_stats([((100, 100), gts)])[0] == 0.0

    def test_same_class_overlap_excluded(self):
        gts = [LabeledBox(Box(0, 0, 60, 60), 1, 0), LabeledBox(Box(20, 20, 80, 80), 1, 1)]
        scenes = [((100, 100), gts)]
        cfg = FpnConfig.no_fpn()
        assert ambiguity_stats(scenes, cfg)[0] > 0.0
        assert ambiguity_stats(scenes, cfg, exclude_same_class=True)[0] == 0.0

    def test_thread_count_does_not_change_counts(self):
        rng = np.random.default_rng(11)
        scenes = [random_scene(rng, max_size=300) for _ in range(40)]
        assert ambiguity_counts(scenes, threads=1) == ambiguity_counts(scenes, threads=4)

    def test_empty_dataset_rejected(self):
        with pytest.raises(ValueError):
            ambiguity_stats([])
