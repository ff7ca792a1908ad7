import itertools
import json

import numpy as np
import pytest

from refparts.attention import Segmentation
from refparts.evaluation import (
    baseline_attention,
    cross_part_miou,
    instance_miou,
    part_iou,
    point_projection_baseline,
    segmentation_report,
    upper_bound_segmentation,
    write_report,
)
from refparts.geometry import PartLabels, PointCloud, ShapeRecord, SuperSegmentSet


def make_shape(labels, assignment, part_names):
    n = len(labels)
    rng = np.random.default_rng(0)
    return ShapeRecord(
        id="s",
        category="chair",
        cloud=PointCloud(rng.normal(size=(n, 3)).astype(np.float32)),
        segments=SuperSegmentSet.from_assignment("s", np.asarray(assignment)),
        gt=PartLabels(np.asarray(labels), part_names=part_names),
    )


class TestPartIoU:
    def test_both_empty_is_one(self):
        assert part_iou(set(), set()) == 1.0

    def test_one_empty_is_zero(self):
        assert part_iou({1, 2}, set()) == 0.0
        assert part_iou(set(), {3}) == 0.0

    def test_hand_value(self):
        # |{1,2} n {2,3}| / |{1,2,3}| = 1/3
        assert part_iou({1, 2}, {2, 3}) == pytest.approx(1 / 3)

    def test_identical_sets(self):
        assert part_iou({0, 5, 9}, {0, 5, 9}) == 1.0


class TestInstanceMiou:
    def test_perfect(self):
        gt = PartLabels(np.array([0, 0, 1, 1]), part_names=["a", "b"])
        assert instance_miou(np.array([0, 0, 1, 1]), gt, 2) == 1.0

    def test_hand_value_all_parts(self):
        # part0: inter 1 union 3 -> 1/3; part1: inter 1 union 3 -> 1/3;
        # part2 absent both -> 1. mean = (1/3 + 1/3 + 1) / 3
        gt = PartLabels(np.array([0, 0, 1, 1]), part_names=["a", "b", "c"])
        pred = np.array([0, 1, 1, 0])
        assert instance_miou(pred, gt, 3) == pytest.approx((1 / 3 + 1 / 3 + 1) / 3)

    def test_present_average_drops_missing_part(self):
        gt = PartLabels(np.array([0, 0, 1, 1]), part_names=["a", "b", "c"])
        pred = np.array([0, 1, 1, 0])
        assert instance_miou(pred, gt, 3, average_set="present") == pytest.approx(1 / 3)


class TestUpperBound:
    def test_majority_per_segment(self):
        shape = make_shape(
            labels=[0, 0, 0, 1, 1, 1, 1, 1], assignment=[0, 0, 0, 0, 1, 1, 1, 1],
            part_names=["a", "b"],
        )
        seg = upper_bound_segmentation(shape.segments, shape.gt)
        assert seg.segment_parts.tolist() == [0, 1]

    def test_tie_goes_to_lowest_part(self):
        shape = make_shape(
            labels=[0, 1, 1, 0], assignment=[0, 0, 0, 0], part_names=["a", "b"]
        )
        seg = upper_bound_segmentation(shape.segments, shape.gt)
        assert seg.segment_parts.tolist() == [0]

    def test_point_accuracy_optimal_by_enumeration(self):
        # Majority voting attains maximal point accuracy over every
        # possible segment labeling.
        rng = np.random.default_rng(3)
        labels = rng.integers(0, 3, size=24)
        assignment = np.repeat(np.arange(4), 6)
        shape = make_shape(labels, assignment, part_names=["a", "b", "c"])
        best = np.mean(
            upper_bound_segmentation(shape.segments, shape.gt).point_parts == labels
        )
        for combo in itertools.product(range(3), repeat=4):
            pts = np.asarray(combo)[assignment]
            assert np.mean(pts == labels) <= best + 1e-12


class TestBaselines:
    def test_uniform_attention_rows(self):
        att = baseline_attention("uniform", num_segments=5, num_parts=3)
        assert att.shape == (5, 3)
        np.testing.assert_allclose(att.sum(axis=0), np.ones(3))
        np.testing.assert_allclose(att, np.full((5, 3), 0.2))

    def test_random_attention_seeded_simplex(self):
        a = baseline_attention("random", 6, 2, seed=4)
        b = baseline_attention("random", 6, 2, seed=4)
        c = baseline_attention("random", 6, 2, seed=5)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)
        np.testing.assert_allclose(a.sum(axis=0), np.ones(2), atol=1e-6)

    def test_point_projection_majority(self):
        segments = SuperSegmentSet.from_assignment("s", np.array([0, 0, 0, 1, 1]))
        seg = point_projection_baseline(np.array([2, 2, 0, 1, 1]), segments, 3)
        assert seg.segment_parts.tolist() == [2, 1]
        assert seg.point_parts.tolist() == [2, 2, 2, 1, 1]


class TestReports:
    def test_report_means(self):
        shapes = [
            make_shape([0, 0, 1, 1], [0, 0, 1, 1], ["a", "b"]),
            make_shape([0, 0, 1, 1], [0, 0, 1, 1], ["a", "b"]),
        ]
        segs = [
            Segmentation(np.array([0, 1]), np.array([0, 0, 1, 1])),
            Segmentation(np.array([1, 1]), np.array([1, 1, 1, 1])),
        ]
        report = segmentation_report(segs, shapes, ["a", "b"])
        # shape 1 perfect (1.0); shape 2: part a 0, part b 2/4 -> 0.25.
        np.testing.assert_allclose(report.per_instance_miou, [1.0, 0.25])
        assert report.average_miou == pytest.approx(0.625)
        np.testing.assert_allclose(report.per_part_iou, [0.5, 0.75])

    def test_cross_part_matrix(self):
        shapes = [make_shape([0, 0, 1, 1], [0, 0, 1, 1], ["a", "b"])]
        segs = [Segmentation(np.array([1, 0]), np.array([1, 1, 0, 0]))]
        mat = cross_part_miou(segs, shapes, ["a", "b"], ["a", "b"])
        np.testing.assert_allclose(mat, [[0.0, 1.0], [1.0, 0.0]])

    def test_write_report_json(self, tmp_path):
        shapes = [make_shape([0, 1], [0, 1], ["a", "b"])]
        segs = [Segmentation(np.array([0, 1]), np.array([0, 1]))]
        report = segmentation_report(segs, shapes, ["a", "b"])
        out = tmp_path / "report.json"
        write_report(out, report, extra={"accuracy": 0.9})
        loaded = json.loads(out.read_text())
        assert loaded["average_miou"] == 1.0
        assert loaded["accuracy"] == 0.9
