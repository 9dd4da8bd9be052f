"""Detection metrics: IoU, FROC sensitivity at fixed false positives per
scan, and average precision at IoU 0.5.

Matching is shared by both metrics: predictions are taken in descending
score order (stable, so input order breaks ties deterministically) and each
is matched greedily to the highest-IoU unmatched ground-truth box on the
same scan and slice, requiring IoU >= threshold. FROC reads sensitivities
off the resulting step curve with no interpolation; AP integrates the
all-point precision envelope.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, MetricUndefinedError

FROC_FP_LEVELS = (1.0, 2.0, 4.0, 8.0)

__all__ = [
    "FROC_FP_LEVELS",
    "LesionBox",
    "EvalReport",
    "iou",
    "match_predictions",
    "froc_sensitivity",
    "average_precision",
    "evaluate_detections",
]


@dataclass(frozen=True)
class LesionBox:
    """Axis-aligned per-slice box; x2 > x1 and y2 > y1."""

    slice_index: int
    x1: float
    y1: float
    x2: float
    y2: float
    score: float = 1.0

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ContractError(
                f"degenerate box ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    @property
    def longer_side(self) -> float:
        return max(self.x2 - self.x1, self.y2 - self.y1)


def iou(a: LesionBox, b: LesionBox) -> float:
    """Intersection over union of two boxes (slice indices ignored)."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    if ix <= 0 or iy <= 0:
        return 0.0
    inter = ix * iy
    return inter / (a.area + b.area - inter)


def match_predictions(
    preds: dict, gts: dict, iou_threshold: float = 0.5
) -> list[tuple[float, bool]]:
    """Label every prediction TP/FP.

    `preds` and `gts` map scan id -> list of LesionBox. Returns
    (score, is_tp) per prediction, sorted by descending score (stable).
    Each ground-truth box is matched at most once.
    """
    flat = []
    for scan_id in preds:
        for order, box in enumerate(preds[scan_id]):
            flat.append((scan_id, order, box))
    flat.sort(key=lambda item: -item[2].score)

    matched: dict = {}
    labels = []
    for scan_id, _order, box in flat:
        candidates = gts.get(scan_id, [])
        best_iou, best_idx = 0.0, None
        for gi, gt in enumerate(candidates):
            if gt.slice_index != box.slice_index or (scan_id, gi) in matched:
                continue
            overlap = iou(box, gt)
            if overlap >= iou_threshold and overlap > best_iou:
                best_iou, best_idx = overlap, gi
        if best_idx is not None:
            matched[(scan_id, best_idx)] = True
            labels.append((box.score, True))
        else:
            labels.append((box.score, False))
    return labels


def _total_gt(gts: dict) -> int:
    return sum(len(v) for v in gts.values())


def froc_sensitivity(
    preds: dict,
    gts: dict,
    levels: tuple = FROC_FP_LEVELS,
    iou_threshold: float = 0.5,
    num_scans: int = None,
) -> tuple[dict, float]:
    """Sensitivity at each false-positives-per-scan level, plus the average.

    Sweeps the score threshold over prediction scores; at each FP level the
    reported sensitivity is the highest one among operating points whose
    mean FPs/scan does not exceed the level (a step function, no
    interpolation).
    """
    total_gt = _total_gt(gts)
    if total_gt == 0:
        raise MetricUndefinedError("sensitivity undefined: no ground-truth boxes")
    scans = num_scans if num_scans is not None else len(set(gts) | set(preds))
    labels = match_predictions(preds, gts, iou_threshold)
    tp = np.cumsum([1 if is_tp else 0 for _, is_tp in labels])
    fp = np.cumsum([0 if is_tp else 1 for _, is_tp in labels])
    sens_curve = tp / total_gt
    fp_per_scan = fp / max(scans, 1)

    out = {}
    for level in levels:
        feasible = sens_curve[fp_per_scan <= level]
        out[level] = float(feasible.max()) if feasible.size else 0.0
    avg = float(np.mean([out[level] for level in levels]))
    return out, avg


def average_precision(preds: dict, gts: dict, iou_threshold: float = 0.5) -> float:
    """All-point-interpolated AP (single class, so this is also the mAP)."""
    total_gt = _total_gt(gts)
    if total_gt == 0:
        raise MetricUndefinedError("average precision undefined: no ground-truth boxes")
    labels = match_predictions(preds, gts, iou_threshold)
    if not labels:
        return 0.0
    tp = np.cumsum([1 if is_tp else 0 for _, is_tp in labels])
    fp = np.cumsum([0 if is_tp else 1 for _, is_tp in labels])
    recall = tp / total_gt
    precision = tp / np.maximum(tp + fp, 1)

    mrec = np.concatenate([[0.0], recall, [recall[-1]]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


@dataclass
class EvalReport:
    sensitivity: dict  # fp level -> sensitivity
    avg_sensitivity: float
    map50: float
    true_positives: int
    false_positives: int
    false_negatives: int
    num_scans: int
    num_gt: int
    num_predictions: int
    config: dict = field(default_factory=dict)
    version: str = ""

    def to_dict(self) -> dict:
        return {
            "map50": self.map50,
            "sensitivity_at_fps": {str(k): v for k, v in self.sensitivity.items()},
            "avg_sensitivity": self.avg_sensitivity,
            "true_positives": self.true_positives,
            "false_positives": self.false_positives,
            "false_negatives": self.false_negatives,
            "num_scans": self.num_scans,
            "num_gt": self.num_gt,
            "num_predictions": self.num_predictions,
            "config": self.config,
            "version": self.version,
        }


def evaluate_detections(
    preds: dict, gts: dict, iou_threshold: float = 0.5, num_scans: int = None
) -> EvalReport:
    """Full report over per-scan predictions and ground truth."""
    sens, avg = froc_sensitivity(preds, gts, iou_threshold=iou_threshold,
                                 num_scans=num_scans)
    ap = average_precision(preds, gts, iou_threshold=iou_threshold)
    labels = match_predictions(preds, gts, iou_threshold)
    tp = sum(1 for _, is_tp in labels if is_tp)
    total_gt = _total_gt(gts)
    return EvalReport(
        sensitivity=sens,
        avg_sensitivity=avg,
        map50=ap,
        true_positives=tp,
        false_positives=len(labels) - tp,
        false_negatives=total_gt - tp,
        num_scans=num_scans if num_scans is not None else len(set(gts) | set(preds)),
        num_gt=total_gt,
        num_predictions=len(labels),
    )
