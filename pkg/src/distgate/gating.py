"""Distance-based gating: turn a distance map into per-branch voxel weights.

Two branches are supported: a tumor-proximal branch and a tumor-distal
branch.  ``binary_gate`` splits voxels strictly at a threshold ``d0`` (the
boundary value itself is proximal), ``soft_gate`` blends linearly between
``d_prox`` and ``d_dist``.  In both variants the distal weight is the exact
complement of the proximal weight, so the two weights always sum to one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .edt import DistanceMap
from .volume import ScalarVolume


@dataclass(frozen=True)
class GatingParams:
    """Gating configuration; thresholds in mm."""

    kind: str  # "binary" | "soft"
    d0: float | None = None
    d_prox: float | None = None
    d_dist: float | None = None

    def __post_init__(self):
        if self.kind == "binary":
            if self.d0 is None or not self.d0 > 0:
                raise ValueError("binary gating requires d0 > 0")
        elif self.kind == "soft":
            if self.d_prox is None or self.d_dist is None:
                raise ValueError("soft gating requires d_prox and d_dist")
            if not 0 < self.d_prox < self.d_dist:
                raise ValueError(
                    f"soft gating requires 0 < d_prox < d_dist, got "
                    f"({self.d_prox}, {self.d_dist})"
                )
        else:
            raise ValueError(f"unknown gating kind '{self.kind}'")


@dataclass
class GatingWeights:
    """Per-branch weight volumes; g_prox + g_dist == 1 at every voxel."""

    g_prox: ScalarVolume
    g_dist: ScalarVolume
    params: GatingParams


def _pair(distance: DistanceMap, g_prox: np.ndarray, params: GatingParams) -> GatingWeights:
    g_prox32 = g_prox.astype(np.float32)
    g_dist32 = np.float32(1.0) - g_prox32
    return GatingWeights(
        ScalarVolume(distance.grid, g_prox32),
        ScalarVolume(distance.grid, g_dist32),
        params,
    )


def binary_gate(distance: DistanceMap, d0: float) -> GatingWeights:
    """Indicator gating: proximal weight 1 where distance <= d0, else 0."""
    params = GatingParams("binary", d0=float(d0))
    g_prox = (distance.data <= d0).astype(np.float64)
    return _pair(distance, g_prox, params)


def soft_gate(distance: DistanceMap, d_prox: float, d_dist: float) -> GatingWeights:
    """Linear-ramp gating.

    Proximal weight is 1 up to d_prox, falls linearly to 0 at d_dist and
    stays 0 beyond; the ramp value at distance x in (d_prox, d_dist] is
    1 - (x - d_prox) / (d_dist - d_prox).
    """
    params = GatingParams("soft", d_prox=float(d_prox), d_dist=float(d_dist))
    d = distance.data.astype(np.float64)
    g_prox = np.clip((d_dist - d) / (d_dist - d_prox), 0.0, 1.0)
    return _pair(distance, g_prox, params)


def single_gate(distance: DistanceMap) -> GatingWeights:
    """Degenerate gating for the ungated single-branch baseline.

    Routes every voxel to the proximal branch (binary gate with an infinite
    threshold); the distal branch receives weight 0 everywhere.
    """
    params = GatingParams("binary", d0=math.inf)
    return _pair(distance, np.ones(distance.grid.shape_zyx), params)


def gate_for_mode(distance: DistanceMap, mode: str, params: "GatingConfig") -> GatingWeights:
    """Build the gating weights used by training/inference mode."""
    if mode == "single":
        return single_gate(distance)
    if mode == "bg":
        return binary_gate(distance, params.d0_mm)
    if mode == "sg":
        return soft_gate(distance, params.d_prox_mm, params.d_dist_mm)
    raise ValueError(f"unknown mode '{mode}' (expected single|bg|sg)")


@dataclass(frozen=True)
class GatingConfig:
    """Threshold set shared by the train/infer/eval commands (mm)."""

    d0_mm: float = 70.0
    d_prox_mm: float = 50.0
    d_dist_mm: float = 90.0
