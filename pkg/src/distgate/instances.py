"""Instance extraction from probability volumes and hit matching.

Detections are the 26-connected components of the super-threshold voxel
set, with tiny components discarded.  A prediction hits a ground-truth
instance when they share at least one voxel and the ratio of their
sphere-equivalent radii (prediction / ground truth) lies in the accepted
range; a prediction overlapping several instances is assigned to the one
with maximal overlap.  Duplicate detections of one instance all count as
hits; the instance itself counts as detected once.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .volume import LabelVolume, ScalarVolume, VolumeGrid

MIN_COMPONENT_VOXELS = 4
RADIUS_RATIO_RANGE = (0.5, 1.5)


def equivalent_radius_mm(voxel_count: int, grid: VolumeGrid) -> float:
    """Radius of the sphere whose volume matches the instance volume."""
    volume_mm3 = voxel_count * grid.voxel_volume_mm3
    return float((3.0 * volume_mm3 / (4.0 * np.pi)) ** (1.0 / 3.0))


@dataclass
class InstancePrediction:
    case_id: str
    voxels: np.ndarray  # (n, 3) int32, columns (x, y, z)
    centroid: tuple[float, float, float]  # (x, y, z) voxel coordinates
    confidence: float  # mean foreground probability over the component
    radius_mm: float

    @property
    def voxel_count(self) -> int:
        return int(self.voxels.shape[0])


@dataclass
class MatchResult:
    """Per-prediction outcome and per-ground-truth detected flags."""

    outcomes: list[tuple[str, int | None]]  # ("hit", gt_id) or ("fp", None)
    detected: np.ndarray  # (K,) bool, index k-1 for instance id k
    gt_radii_mm: np.ndarray  # (K,) float

    @property
    def n_hits(self) -> int:
        return sum(1 for kind, _ in self.outcomes if kind == "hit")

    @property
    def n_false_positives(self) -> int:
        return sum(1 for kind, _ in self.outcomes if kind == "fp")


def extract_instances(
    prob: ScalarVolume,
    threshold: float,
    min_voxels: int = MIN_COMPONENT_VOXELS,
    case_id: str = "",
) -> list[InstancePrediction]:
    """26-connected components of {P >= threshold}, small ones discarded."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must be in (0, 1), got {threshold}")
    binary = prob.data >= threshold
    structure = np.ones((3, 3, 3), dtype=bool)
    labeled, n = ndimage.label(binary, structure=structure)
    preds = []
    for k in range(1, n + 1):
        zyx = np.argwhere(labeled == k)
        if zyx.shape[0] < min_voxels:
            continue
        values = prob.data[zyx[:, 0], zyx[:, 1], zyx[:, 2]]
        centroid = zyx.mean(axis=0)
        preds.append(
            InstancePrediction(
                case_id=case_id,
                voxels=zyx[:, ::-1].astype(np.int32),
                centroid=(float(centroid[2]), float(centroid[1]), float(centroid[0])),
                confidence=float(values.mean(dtype=np.float64)),
                radius_mm=equivalent_radius_mm(zyx.shape[0], prob.grid),
            )
        )
    return preds


def match_hits(
    preds: list[InstancePrediction],
    gt: LabelVolume,
    radius_ratio_range: tuple[float, float] = RADIUS_RATIO_RANGE,
) -> MatchResult:
    """Assign predictions to ground-truth instances and classify them."""
    k_instances = gt.num_instances
    counts = np.bincount(gt.data.ravel(), minlength=k_instances + 1)
    gt_radii = np.array(
        [equivalent_radius_mm(int(counts[k]), gt.grid) for k in range(1, k_instances + 1)]
    )
    detected = np.zeros(k_instances, dtype=bool)
    lo, hi = radius_ratio_range
    outcomes: list[tuple[str, int | None]] = []
    for pred in preds:
        v = pred.voxels
        if v.size and (
            (v[:, 0] >= gt.grid.dims[0]).any()
            or (v[:, 1] >= gt.grid.dims[1]).any()
            or (v[:, 2] >= gt.grid.dims[2]).any()
        ):
            raise ValueError("prediction voxels fall outside the ground-truth grid")
        overlap_ids = gt.data[v[:, 2], v[:, 1], v[:, 0]]
        overlap_ids = overlap_ids[overlap_ids > 0]
        if overlap_ids.size == 0:
            outcomes.append(("fp", None))
            continue
        hist = np.bincount(overlap_ids, minlength=k_instances + 1)
        assigned = int(hist[1:].argmax()) + 1  # ties resolve to the smallest id
        ratio = pred.radius_mm / gt_radii[assigned - 1]
        if lo <= ratio <= hi:
            outcomes.append(("hit", assigned))
            detected[assigned - 1] = True
        else:
            outcomes.append(("fp", None))
    return MatchResult(outcomes=outcomes, detected=detected, gt_radii_mm=gt_radii)


def instances_to_json(
    preds: list[InstancePrediction], match: MatchResult | None = None
) -> list[dict]:
    """Serializable instance list; ``match`` adds the per-prediction outcome."""
    rows = []
    for i, p in enumerate(preds):
        row = {
            "case_id": p.case_id,
            "voxels_count": p.voxel_count,
            "centroid": [round(c, 4) for c in p.centroid],
            "confidence": p.confidence,
            "radius_mm": p.radius_mm,
        }
        if match is not None:
            kind, gt_id = match.outcomes[i]
            row["match"] = {"hit": kind == "hit", "gt_id": gt_id}
        rows.append(row)
    return rows


def save_instances(path: str | Path, preds: list[InstancePrediction],
                   match: MatchResult | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(instances_to_json(preds, match), fh, indent=2, sort_keys=True)
        fh.write("\n")
