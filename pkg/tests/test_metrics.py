"""Metrics: IoU analytic cases, FROC vs a hand-enumerated sweep, AP vs a
brute-force PR oracle, and monotonicity properties."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from vdformer.errors import ContractError, MetricUndefinedError
from vdformer.metrics import (
    LesionBox,
    average_precision,
    evaluate_detections,
    froc_sensitivity,
    iou,
    match_predictions,
)


def box(slice_index, x1, y1, x2, y2, score=1.0):
    return LesionBox(slice_index, x1, y1, x2, y2, score)


# ---------------------------------------------------------------------------
# IoU
# ---------------------------------------------------------------------------

def test_iou_identical():
    a = box(0, 0, 0, 2, 2)
    assert iou(a, a) == 1.0


def test_iou_disjoint():
    assert iou(box(0, 0, 0, 2, 2), box(0, 5, 5, 7, 7)) == 0.0


def test_iou_analytic_third():
    assert_allclose(iou(box(0, 0, 0, 2, 2), box(0, 1, 0, 3, 2)), 1.0 / 3.0)


def test_degenerate_box_rejected():
    with pytest.raises(ContractError):
        box(0, 1, 1, 1, 3)


# ---------------------------------------------------------------------------
# FROC
# ---------------------------------------------------------------------------

def _perfect_case():
    gts = {
        "s1": [box(0, 10, 10, 16, 16), box(3, 30, 30, 34, 34)],
        "s2": [box(5, 12, 12, 20, 20)],
    }
    preds = {
        scan: [LesionBox(b.slice_index, b.x1, b.y1, b.x2, b.y2, 0.9) for b in v]
        for scan, v in gts.items()
    }
    return preds, gts


def test_froc_perfect_detector_is_one_everywhere():
    preds, gts = _perfect_case()
    sens, avg = froc_sensitivity(preds, gts)
    assert all(v == 1.0 for v in sens.values())
    assert avg == 1.0


def test_froc_no_predictions_is_zero():
    _, gts = _perfect_case()
    sens, avg = froc_sensitivity({}, gts, num_scans=2)
    assert all(v == 0.0 for v in sens.values())
    assert avg == 0.0


def test_froc_empty_gt_is_undefined():
    with pytest.raises(MetricUndefinedError):
        froc_sensitivity({}, {"s1": [], "s2": []})


def test_froc_hand_enumerated_two_scan_case():
    """3 GTs over 2 scans; predictions in score order are TP(.9), FP(.85),
    TP(.8), FP(.7), FP(.6).

    Sweep: k=1 -> sens 1/3, FP/scan 0;   k=2 -> 1/3, 0.5;
           k=3 -> 2/3, 0.5;              k=4 -> 2/3, 1.0;
           k=5 -> 2/3, 1.5.
    Sensitivity at 1 FP/scan: best k with FP/scan <= 1 is k=4 -> 2/3.
    At 2, 4, 8: k=5 also allowed -> still 2/3.
    """
    gts = {
        "s1": [box(0, 10, 10, 20, 20), box(1, 40, 40, 50, 50)],
        "s2": [box(2, 10, 10, 20, 20)],
    }
    preds = {
        "s1": [
            box(0, 10, 10, 20, 20, score=0.9),     # TP
            box(5, 30, 30, 40, 40, score=0.85),    # FP (no GT on slice 5)
            box(1, 41, 40, 51, 50, score=0.7),     # FP? IoU with GT2 = 9/11 -> TP!
        ],
        "s2": [
            box(2, 11, 10, 21, 20, score=0.8),     # IoU 9/11 >= 0.5 -> TP
        ],
    }
    # fix the .7 prediction to actually be an FP: move it off the GT
    preds["s1"][2] = box(1, 60, 60, 70, 70, score=0.7)
    preds["s2"].append(box(9, 1, 1, 5, 5, score=0.6))  # FP
    sens, avg = froc_sensitivity(preds, gts)
    assert_allclose([sens[1.0], sens[2.0], sens[4.0], sens[8.0]],
                    [2 / 3, 2 / 3, 2 / 3, 2 / 3])
    assert_allclose(avg, 2 / 3)


def test_froc_sensitivity_nondecreasing_in_fp_level(rng):
    gts = {"s": [box(z, 10, 10, 20, 20) for z in range(4)]}
    preds = {"s": []}
    for z in range(4):
        preds["s"].append(box(z, 10, 10, 20, 20, score=float(rng.random())))
    for z in range(6):
        preds["s"].append(
            box(z, 40, 40, 44, 44, score=float(rng.random()))
        )
    sens, _ = froc_sensitivity(preds, gts, num_scans=1)
    values = [sens[k] for k in (1.0, 2.0, 4.0, 8.0)]
    assert values == sorted(values)
    assert all(0.0 <= v <= 1.0 for v in values)


# ---------------------------------------------------------------------------
# Average precision
# ---------------------------------------------------------------------------

def test_ap_single_match_is_one():
    gts = {"s": [box(0, 0, 0, 10, 10)]}
    preds = {"s": [box(0, 0, 0, 10, 10, score=0.7)]}
    assert average_precision(preds, gts) == 1.0


def test_ap_low_iou_match_is_zero():
    gts = {"s": [box(0, 0, 0, 10, 10)]}
    preds = {"s": [box(0, 6, 0, 16, 10, score=0.7)]}  # IoU = 4/16 = 0.25
    assert average_precision(preds, gts) == 0.0


def test_ap_no_gt_is_undefined():
    with pytest.raises(MetricUndefinedError):
        average_precision({"s": [box(0, 0, 0, 1, 1, 0.5)]}, {"s": []})


def brute_force_ap(labels, total_gt):
    """Directly enumerate the PR curve and integrate the envelope."""
    points = []
    tp = fp = 0
    for _score, is_tp in labels:
        tp += is_tp
        fp += not is_tp
        points.append((tp / total_gt, tp / (tp + fp)))
    ap = 0.0
    prev_recall = 0.0
    for recall, _ in points:
        if recall == prev_recall:
            continue
        best_precision = max(p for r, p in points if r >= recall)
        ap += (recall - prev_recall) * best_precision
        prev_recall = recall
    return ap


def test_ap_matches_brute_force_pr_oracle():
    # 2 GTs, 3 predictions: TP(.9), FP(.8), TP(.6)
    gts = {"s": [box(0, 0, 0, 10, 10), box(1, 20, 20, 30, 30)]}
    preds = {"s": [
        box(0, 0, 0, 10, 10, score=0.9),
        box(2, 50, 50, 60, 60, score=0.8),
        box(1, 20, 20, 30, 30, score=0.6),
    ]}
    labels = match_predictions(preds, gts)
    expected = brute_force_ap(labels, 2)
    got = average_precision(preds, gts)
    assert_allclose(got, expected, atol=1e-12)
    # hand value: PR points (0.5, 1.0), (0.5, 0.5), (1.0, 2/3)
    assert_allclose(got, 0.5 * 1.0 + 0.5 * (2 / 3), atol=1e-12)


def test_ap_matches_brute_force_on_random_cases(rng):
    for trial in range(25):
        n_gt = int(rng.integers(1, 5))
        gts = {"s": [box(int(rng.integers(0, 3)), 10 * g, 10 * g, 10 * g + 8, 10 * g + 8)
                     for g in range(n_gt)]}
        preds = {"s": []}
        for _ in range(int(rng.integers(0, 8))):
            g = int(rng.integers(0, n_gt))
            jitter = float(rng.uniform(0, 6))
            z = int(rng.integers(0, 3))
            preds["s"].append(
                box(z, 10 * g + jitter, 10 * g, 10 * g + 8 + jitter, 10 * g + 8,
                    score=float(rng.random()))
            )
        if not preds["s"]:
            continue
        labels = match_predictions(preds, gts)
        assert_allclose(average_precision(preds, gts),
                        brute_force_ap(labels, n_gt), atol=1e-12)


# ---------------------------------------------------------------------------
# properties
# ---------------------------------------------------------------------------

def test_matching_is_injective(rng):
    gts = {"s": [box(0, 0, 0, 10, 10)]}
    preds = {"s": [box(0, 0, 0, 10, 10, 0.9), box(0, 1, 0, 11, 10, 0.8)]}
    labels = match_predictions(preds, gts)
    assert sum(1 for _, is_tp in labels if is_tp) == 1


def test_adding_correct_detection_never_hurts():
    gts = {"s": [box(0, 0, 0, 10, 10), box(1, 20, 20, 30, 30)]}
    preds = {"s": [box(0, 0, 0, 10, 10, score=0.9),
                   box(2, 50, 50, 60, 60, score=0.5)]}
    base_ap = average_precision(preds, gts)
    base_sens, _ = froc_sensitivity(preds, gts, num_scans=1)
    better = {"s": preds["s"] + [box(1, 20, 20, 30, 30, score=0.7)]}
    new_ap = average_precision(better, gts)
    new_sens, _ = froc_sensitivity(better, gts, num_scans=1)
    assert new_ap >= base_ap
    assert all(new_sens[k] >= base_sens[k] for k in base_sens)


def test_adding_false_positive_never_helps_ap():
    gts = {"s": [box(0, 0, 0, 10, 10)]}
    preds = {"s": [box(0, 0, 0, 10, 10, score=0.9)]}
    base = average_precision(preds, gts)
    worse = {"s": preds["s"] + [box(3, 40, 40, 50, 50, score=0.95)]}
    assert average_precision(worse, gts) <= base


def test_evaluate_detections_counts():
    preds, gts = _perfect_case()
    report = evaluate_detections(preds, gts, num_scans=2)
    assert report.true_positives == 3
    assert report.false_positives == 0
    assert report.false_negatives == 0
    assert report.map50 == 1.0
    assert report.num_scans == 2
