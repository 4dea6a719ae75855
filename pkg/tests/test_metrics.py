import numpy as np
import pytest

from distgate.metrics import (
    DetectionRecord,
    EvalReport,
    PrPoint,
    build_report,
    froc,
    mean_recall,
    pr_sweep,
)


def fixture_records():
    """2 cases, 4 ground-truth instances, 5 scored detections."""
    return [
        DetectionRecord("a", 0.9, gt_id=1),
        DetectionRecord("a", 0.8, gt_id=None),
        DetectionRecord("b", 0.7, gt_id=1),
        DetectionRecord("b", 0.6, gt_id=None),
        DetectionRecord("a", 0.5, gt_id=None),
    ]


def oracle_records(n_cases=3, per_case=4):
    return [
        DetectionRecord(f"c{i}", 0.9, gt_id=k + 1)
        for i in range(n_cases)
        for k in range(per_case)
    ]


class TestPrSweep:
    def test_fixture_two_cutoffs(self):
        points = pr_sweep(fixture_records(), total_gt=4, n_cases=2, thresholds=[0.75, 0.45])
        by_t = {p.threshold: p for p in points}
        assert by_t[0.75].precision == pytest.approx(1 / 2)
        assert by_t[0.75].recall == pytest.approx(1 / 4)
        assert by_t[0.45].precision == pytest.approx(2 / 5)
        assert by_t[0.45].recall == pytest.approx(2 / 4)
        assert by_t[0.45].fps_per_patient == pytest.approx(1.5)

    def test_default_thresholds_are_observed_confidences(self):
        points = pr_sweep(fixture_records(), total_gt=4, n_cases=2)
        assert [p.threshold for p in points] == [0.9, 0.8, 0.7, 0.6, 0.5]

    def test_oracle_curve_is_perfect(self):
        points = pr_sweep(oracle_records(), total_gt=12, n_cases=3)
        assert all(p.precision == 1.0 and p.recall == 1.0 for p in points)

    def test_cutoff_above_everything(self):
        points = pr_sweep(fixture_records(), total_gt=4, n_cases=2, thresholds=[0.95])
        assert points[0].recall == 0.0
        assert points[0].precision == 1.0  # degenerate convention

    def test_no_records_degenerate_point(self):
        points = pr_sweep([], total_gt=4, n_cases=2)
        assert len(points) == 1
        assert points[0].precision == 1.0 and points[0].recall == 0.0

    def test_duplicate_hits_count_once_for_recall(self):
        records = [
            DetectionRecord("a", 0.9, gt_id=1),
            DetectionRecord("a", 0.8, gt_id=1),
        ]
        points = pr_sweep(records, total_gt=2, n_cases=1)
        assert points[-1].recall == pytest.approx(0.5)
        assert points[-1].precision == 1.0

    def test_same_gt_id_in_different_cases_distinct(self):
        records = [
            DetectionRecord("a", 0.9, gt_id=1),
            DetectionRecord("b", 0.8, gt_id=1),
        ]
        points = pr_sweep(records, total_gt=2, n_cases=2)
        assert points[-1].recall == pytest.approx(1.0)

    def test_monotone_recall_along_sweep(self):
        rng = np.random.default_rng(0)
        records = [
            DetectionRecord(f"c{rng.integers(4)}", float(rng.random()),
                            gt_id=int(rng.integers(1, 5)) if rng.random() < 0.5 else None)
            for _ in range(40)
        ]
        points = pr_sweep(records, total_gt=16, n_cases=4)
        recalls = [p.recall for p in points]  # descending thresholds
        assert all(a <= b + 1e-12 for a, b in zip(recalls, recalls[1:]))

    def test_input_validation(self):
        with pytest.raises(ValueError):
            pr_sweep([], total_gt=0, n_cases=1)
        with pytest.raises(ValueError):
            pr_sweep([], total_gt=1, n_cases=0)


class TestMeanRecall:
    def test_fixture_value_from_stated_rule(self):
        # curve points: (precision 0.5, recall 0.25) and (0.4, 0.5).
        # recall@p = max recall among points with precision >= p:
        #   p in {0.10..0.40}: both qualify        -> 0.5   (7 levels)
        #   p in {0.45, 0.50}: only the 0.5 point  -> 0.25  (2 levels)
        points = pr_sweep(fixture_records(), total_gt=4, n_cases=2, thresholds=[0.75, 0.45])
        m_recall, recall_max = mean_recall(points)
        expected = (7 * 0.5 + 2 * 0.25) / 9
        assert m_recall == pytest.approx(expected, abs=1e-12)
        assert recall_max == pytest.approx(0.5)

    def test_level_grid_sensitivity(self):
        # the same curve evaluated on a grid shifted down one notch
        # (0.05..0.45) yields (8*0.5 + 0.25)/9 = 0.4722...
        points = pr_sweep(fixture_records(), total_gt=4, n_cases=2, thresholds=[0.75, 0.45])
        shifted = tuple(round(0.05 + 0.05 * i, 2) for i in range(9))
        m_recall, _ = mean_recall(points, precision_levels=shifted)
        assert m_recall == pytest.approx((8 * 0.5 + 0.25) / 9, abs=1e-12)

    def test_oracle_reaches_one(self):
        points = pr_sweep(oracle_records(), total_gt=12, n_cases=3)
        m_recall, recall_max = mean_recall(points)
        assert m_recall == 1.0 and recall_max == 1.0

    def test_curve_below_min_precision_gives_zero(self):
        records = [DetectionRecord("a", 0.9 - 0.01 * i, gt_id=None) for i in range(10)]
        records.append(DetectionRecord("a", 0.5, gt_id=1))
        points = pr_sweep(records, total_gt=4, n_cases=1)
        assert max(p.precision for p in points) < 0.10
        m_recall, recall_max = mean_recall(points)
        assert m_recall == 0.0 and recall_max == 0.0

    def test_empty_curve_rejected(self):
        with pytest.raises(ValueError):
            mean_recall([])


class TestFroc:
    def test_fixture_all_levels_half(self):
        points = pr_sweep(fixture_records(), total_gt=4, n_cases=2, thresholds=[0.75, 0.45])
        froc_at, m_froc = froc(points)
        assert froc_at == {3.0: 0.5, 4.0: 0.5, 6.0: 0.5, 8.0: 0.5}
        assert m_froc == pytest.approx(0.5)

    def test_oracle_no_fps(self):
        points = pr_sweep(oracle_records(), total_gt=12, n_cases=3)
        froc_at, m_froc = froc(points)
        assert all(v == 1.0 for v in froc_at.values())
        assert m_froc == 1.0

    def test_extended_fixture_heavy_fp_point(self):
        records = fixture_records() + [
            DetectionRecord("a", 0.4, gt_id=None) for _ in range(12)
        ]
        points = pr_sweep(records, total_gt=4, n_cases=2, thresholds=[0.75, 0.45, 0.35])
        by_t = {p.threshold: p for p in points}
        assert by_t[0.35].fps_per_patient == pytest.approx(7.5)
        froc_at, _ = froc(points)
        assert froc_at[3.0] == pytest.approx(0.5)  # still the 1.5-FP point
        assert froc_at[4.0] == pytest.approx(0.5)
        assert froc_at[8.0] == pytest.approx(by_t[0.35].recall)

    def test_no_qualifying_point_contributes_zero(self):
        points = [PrPoint(threshold=0.5, precision=0.2, recall=0.8, fps_per_patient=20.0)]
        froc_at, m_froc = froc(points)
        assert all(v == 0.0 for v in froc_at.values())
        assert m_froc == 0.0


class TestInvariances:
    def test_confidence_rescaling_leaves_metrics_unchanged(self):
        records = fixture_records()
        squashed = [
            DetectionRecord(r.case_id, float(1 / (1 + np.exp(-5 * r.confidence))), r.gt_id)
            for r in records
        ]
        a = build_report(records, total_gt=4, n_cases=2)
        b = build_report(squashed, total_gt=4, n_cases=2)
        assert a.m_recall == pytest.approx(b.m_recall)
        assert a.recall_max == pytest.approx(b.recall_max)
        assert a.m_froc == pytest.approx(b.m_froc)


class TestReport:
    def test_report_roundtrip_fields(self):
        report = build_report(fixture_records(), total_gt=4, n_cases=2)
        d = report.to_dict()
        assert set(d) == {
            "points", "mRecall", "recall_max", "froc_at", "mFROC", "total_gt", "n_cases"
        }
        assert d["froc_at"]["3"] == report.froc_at[3.0]
        assert isinstance(report, EvalReport)
