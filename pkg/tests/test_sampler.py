import json

import numpy as np
import pytest

from iou_uniform.boxgeom import BBox, as_array, iou, iou_matrix
from iou_uniform.sampler import (
    IntervalConfig,
    IoURangeError,
    JitterRange,
    JitterRanges,
    assign_interval,
    assign_intervals,
    generate_uniform_samples,
    jitter_array,
    jitter_once,
)

DEFAULT = IntervalConfig()


class _FixedDraws:
    """Stands in for a Generator, returning preset uniform draws."""

    def __init__(self, *draws):
        self.draws = list(draws)

    def uniform(self, lo, hi, size):
        return np.asarray(self.draws.pop(0), dtype=float).reshape(size)


class TestConfig:
    def test_defaults(self):
        assert DEFAULT.n_intervals == 4
        assert DEFAULT.samples_per_interval == 64
        assert DEFAULT.weights == (1.0, 1.5, 3.0, 3.0)

    @pytest.mark.parametrize(
        "kw",
        [
            {"boundaries": (0.4, 0.6, 1.0), "weights": (1, 1)},
            {"boundaries": (0.5, 0.7, 0.6, 1.0), "weights": (1, 1, 1)},
            {"boundaries": (0.5, 0.7, 0.9), "weights": (1, 1)},
            {"weights": (1, 1, 1)},
            {"weights": (1, 0, 1, 1)},
        ],
    )
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            IntervalConfig(**kw)

    def test_ranges_must_tighten(self):
        with pytest.raises(ValueError):
            JitterRanges((JitterRange(0.1, 0.9, 1.1), JitterRange(0.2, 0.9, 1.1)))
        with pytest.raises(ValueError):
            JitterRange(0.1, 1.1, 1.2)


class TestAssignInterval:
    @pytest.mark.parametrize("v,j", [(0.55, 0), (0.60, 1), (1.0, 3), (0.7999, 2), (0.8, 3), (0.5, 0)])
    def test_boundaries(self, v, j):
        assert assign_interval(v, DEFAULT) == j

    def test_below_range(self):
        with pytest.raises(IoURangeError):
            assign_interval(0.49, DEFAULT)

    def test_random_property(self):
        rng = np.random.default_rng(0)
        vals = rng.uniform(0.5, 1.0, 10_000)
        b = DEFAULT.boundaries
        for v in vals:
            j = assign_interval(float(v), DEFAULT)
            assert b[j] <= v < b[j + 1]
        np.testing.assert_array_equal(
            assign_intervals(vals, b), [assign_interval(float(v), DEFAULT) for v in vals]
        )


class TestJitter:
    def test_zero_jitter(self):
        gt = BBox(3, 4, 5, 6)
        out = jitter_once(gt, JitterRange(0.0, 1.0, 1.0), np.random.default_rng(0))
        assert out == gt and iou(out, gt) == 1.0

    def test_forced_offset(self):
        out = jitter_once(BBox(0, 0, 10, 10), JitterRange(0.2, 0.9, 1.1),
                          _FixedDraws([0.1, 0.0], [1.0, 1.0]))
        assert out.as_tuple() == pytest.approx((1, 0, 10, 10))

    def test_within_bounds(self):
        rng = np.random.default_rng(1)
        r = JitterRange(0.25, 0.7, 1.35)
        out = jitter_array(np.array([10.0, 20, 4, 8]), r, 5000, rng)
        assert np.all(np.abs(out[:, 0] - 10) <= 4 * 0.25 + 1e-12)
        assert np.all(np.abs(out[:, 1] - 20) <= 8 * 0.25 + 1e-12)
        assert np.all((out[:, 2] >= 4 * 0.7) & (out[:, 2] <= 4 * 1.35))

    def test_top_interval_calibration(self):
        # Monte-Carlo calibration behind the default ranges, 10^5 draws
        rng = np.random.default_rng(2)
        gt = np.array([0.0, 0.0, 1.0, 1.0])
        ranges = JitterRanges()
        out = jitter_array(gt, ranges[3], 100_000, rng)
        ious = iou_matrix(out, gt[None])[:, 0]
        assert np.mean((ious >= 0.8) & (ious <= 1.0)) >= 0.20
        b = DEFAULT.boundaries
        for j in range(4):
            draws = jitter_array(gt, ranges[j], 100_000, rng)
            v = iou_matrix(draws, gt[None])[:, 0]
            hi_ok = v <= b[j + 1] if j == 3 else v < b[j + 1]
            assert np.mean((v >= b[j]) & hi_ok) > 0.10

    def test_difficulty_monotone(self):
        rng = np.random.default_rng(3)
        gt = np.array([0.0, 0.0, 1.0, 1.0])
        ranges = JitterRanges()
        rates = []
        for j in (0, 3):
            v = iou_matrix(jitter_array(gt, ranges[j], 50_000, rng), gt[None])[:, 0]
            rates.append(1.0 - np.mean(v >= 0.8))
        assert rates[0] > rates[1]


def _separated(k, spacing=200.0):
    return [BBox(50 + spacing * i, 50, 40 + 5 * i, 30 + 3 * i) for i in range(k)]


class TestGenerate:
    def test_single_gt_counts(self):
        res = generate_uniform_samples(_separated(1), rng=np.random.default_rng(0))
        assert len(res.samples) == 256
        assert res.complete
        np.testing.assert_array_equal(np.bincount(res.samples.interval), [64] * 4)

    def test_three_gts(self):
        res = generate_uniform_samples(_separated(3), rng=np.random.default_rng(1))
        assert len(res.samples) == 768
        np.testing.assert_array_equal(res.accepted, np.full((3, 4), 64))

    def test_samples_valid(self):
        gts = _separated(3, spacing=60)
        res = generate_uniform_samples(gts, rng=np.random.default_rng(2))
        garr = as_array(gts)
        m = iou_matrix(res.samples.boxes, garr)
        np.testing.assert_array_equal(np.argmax(m, axis=1), res.samples.gt_index)
        np.testing.assert_allclose(m[np.arange(len(m)), res.samples.gt_index], res.samples.iou)
        b = DEFAULT.boundaries
        for s in res.samples:
            assert b[s.interval] <= s.iou <= b[s.interval + 1]
            if s.interval < 3:
                assert s.iou < b[s.interval + 1]

    def test_crowded_pair_rejects_and_reports(self):
        # two GTs overlapping at IoU 0.85
        a = BBox(0, 0, 10, 10)
        dx = 10 * (1 - 2 * 0.85 / 1.85)
        b = BBox(dx, 0, 10, 10)
        assert iou(a, b) == pytest.approx(0.85)
        garr = as_array([a, b])

        # some in-band jitters of A match B better and must be rejected
        draws = jitter_array(garr[0], JitterRanges()[0], 20_000, np.random.default_rng(5))
        m = iou_matrix(draws, garr)
        in_band = (m[:, 0] >= 0.5) & (m[:, 0] < 0.6)
        assert np.any(in_band & (m[:, 1] > m[:, 0]))

        res = generate_uniform_samples([a, b], rng=np.random.default_rng(3), max_attempts=128)
        assert len(res.samples) < 2 * 256
        assert res.shortfalls
        for sf in res.shortfalls:
            assert sf.accepted < 64 and sf.attempts == 128
        assert res.accepted.sum() == len(res.samples)
        m = iou_matrix(res.samples.boxes, garr)
        np.testing.assert_array_equal(np.argmax(m, axis=1), res.samples.gt_index)

    def test_deterministic_bytes(self):
        def dump(seed):
            res = generate_uniform_samples(_separated(2), rng=np.random.default_rng(seed))
            return json.dumps([[list(s.box.as_tuple()), s.gt_index, s.iou, s.interval]
                               for s in res.samples])

        assert dump(7) == dump(7)
        assert dump(7) != dump(8)

    def test_clip_rechecks_interval(self):
        gt = [BBox(5, 5, 10, 10)]
        res = generate_uniform_samples(gt, rng=np.random.default_rng(4), clip_to=(20.0, 20.0))
        boxes = res.samples.boxes
        assert np.all(boxes[:, 0] - boxes[:, 2] / 2 >= -1e-12)
        v = iou_matrix(boxes, as_array(gt))[:, 0]
        np.testing.assert_allclose(v, res.samples.iou)
        np.testing.assert_array_equal(assign_intervals(v, DEFAULT.boundaries), res.samples.interval)

    def test_bad_budget(self):
        with pytest.raises(ValueError):
            generate_uniform_samples(_separated(1), max_attempts=10)
