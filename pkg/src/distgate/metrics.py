"""Dataset-level detection evaluation: PR sweep, mean recall, FROC.

All metrics depend only on the confidence ranking of the detections, the
per-detection hit assignment, the total ground-truth count and the number
of cases.  Conventions for degenerate situations: precision is 1.0 when no
prediction survives a cutoff, and recall-at-precision / FROC levels with no
qualifying operating point contribute 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .instances import InstancePrediction, MatchResult

PRECISION_LEVELS = tuple(round(0.10 + 0.05 * i, 2) for i in range(9))  # 0.10 .. 0.50
FROC_FP_LEVELS = (3.0, 4.0, 6.0, 8.0)


@dataclass(frozen=True)
class DetectionRecord:
    """One scored detection: its case, confidence and matched instance."""

    case_id: str
    confidence: float
    gt_id: int | None  # matched ground-truth instance id, None for a false positive


@dataclass(frozen=True)
class PrPoint:
    threshold: float
    precision: float
    recall: float
    fps_per_patient: float


@dataclass
class EvalReport:
    points: list[PrPoint]
    m_recall: float
    recall_max: float
    froc_at: dict[float, float]
    m_froc: float
    total_gt: int = 0
    n_cases: int = 0

    def to_dict(self) -> dict:
        return {
            "points": [
                {
                    "threshold": p.threshold,
                    "precision": p.precision,
                    "recall": p.recall,
                    "fps_per_patient": p.fps_per_patient,
                }
                for p in self.points
            ],
            "mRecall": self.m_recall,
            "recall_max": self.recall_max,
            "froc_at": {f"{k:g}": v for k, v in self.froc_at.items()},
            "mFROC": self.m_froc,
            "total_gt": self.total_gt,
            "n_cases": self.n_cases,
        }


def records_from_matches(
    preds: list[InstancePrediction], match: MatchResult
) -> list[DetectionRecord]:
    return [
        DetectionRecord(p.case_id, p.confidence, gt_id if kind == "hit" else None)
        for p, (kind, gt_id) in zip(preds, match.outcomes)
    ]


def pr_sweep(
    records: list[DetectionRecord],
    total_gt: int,
    n_cases: int,
    thresholds: list[float] | None = None,
) -> list[PrPoint]:
    """Precision/recall/FP-rate at descending confidence cutoffs.

    At cutoff t the detections with confidence >= t are kept; recall counts
    distinct detected ground-truth instances, precision counts hit
    detections over all kept detections (duplicate hits are not false
    positives).  Thresholds default to the sorted set of observed
    confidences.
    """
    if total_gt < 1:
        raise ValueError("need at least one ground-truth instance")
    if n_cases < 1:
        raise ValueError("need at least one case")
    if thresholds is None:
        thresholds = sorted({r.confidence for r in records}, reverse=True)
    else:
        thresholds = sorted(thresholds, reverse=True)
    if not thresholds:
        return [PrPoint(threshold=1.0, precision=1.0, recall=0.0, fps_per_patient=0.0)]
    points = []
    for t in thresholds:
        kept = [r for r in records if r.confidence >= t]
        hits = [r for r in kept if r.gt_id is not None]
        n_fp = len(kept) - len(hits)
        detected = {(r.case_id, r.gt_id) for r in hits}
        precision = len(hits) / len(kept) if kept else 1.0
        points.append(
            PrPoint(
                threshold=float(t),
                precision=precision,
                recall=len(detected) / total_gt,
                fps_per_patient=n_fp / n_cases,
            )
        )
    return points


def mean_recall(
    points: list[PrPoint],
    precision_levels: tuple[float, ...] = PRECISION_LEVELS,
) -> tuple[float, float]:
    """Mean and max of recall-at-precision over the level grid.

    recall@p is the maximum recall among operating points whose precision
    is >= p, or 0 when no point qualifies.
    """
    if not points:
        raise ValueError("empty curve")
    recalls = []
    for level in precision_levels:
        qualifying = [pt.recall for pt in points if pt.precision >= level]
        recalls.append(max(qualifying) if qualifying else 0.0)
    return float(np.mean(recalls)), float(max(recalls))


def froc(
    points: list[PrPoint],
    fp_levels: tuple[float, ...] = FROC_FP_LEVELS,
) -> tuple[dict[float, float], float]:
    """Recall at the operating point with the most FPs/patient <= each level.

    Step interpolation: the qualifying point with maximal fps_per_patient
    is used (ties resolved toward higher recall); levels with no qualifying
    point contribute 0.
    """
    if not points:
        raise ValueError("empty curve")
    froc_at = {}
    for level in fp_levels:
        qualifying = [pt for pt in points if pt.fps_per_patient <= level]
        if qualifying:
            best = max(qualifying, key=lambda pt: (pt.fps_per_patient, pt.recall))
            froc_at[float(level)] = best.recall
        else:
            froc_at[float(level)] = 0.0
    return froc_at, float(np.mean(list(froc_at.values())))


def build_report(
    records: list[DetectionRecord],
    total_gt: int,
    n_cases: int,
    thresholds: list[float] | None = None,
) -> EvalReport:
    points = pr_sweep(records, total_gt, n_cases, thresholds)
    m_recall, recall_max = mean_recall(points)
    froc_at, m_froc = froc(points)
    return EvalReport(
        points=points,
        m_recall=m_recall,
        recall_max=recall_max,
        froc_at=froc_at,
        m_froc=m_froc,
        total_gt=total_gt,
        n_cases=n_cases,
    )


def save_report(report: EvalReport, path: str | Path) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_curve_csv(points: list[PrPoint], path: str | Path) -> None:
    lines = ["threshold,precision,recall,fps_per_patient"]
    lines += [
        f"{p.threshold!r},{p.precision!r},{p.recall!r},{p.fps_per_patient!r}" for p in points
    ]
    Path(path).write_text("\n".join(lines) + "\n")
