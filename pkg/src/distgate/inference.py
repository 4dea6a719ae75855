"""Sliding-window whole-case prediction with gated fusion of the branches.

Windows tile the case on a regular stride grid; the final window of each
axis is clamped to the volume edge so coverage is complete.  Overlapping
window contributions are averaged by per-voxel visit count.  The two
branch volumes are fused with case-level gating weights computed once from
the full distance map (the distance map does not depend on the window, so
per-window recomputation would change nothing).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gating import GatingConfig, GatingWeights, gate_for_mode
from .model import SegmenterParams, forward, normalize_input_stack
from .pipeline import CaseRecord
from .volume import ScalarVolume

DEFAULT_WINDOW = (96, 96, 64)
DEFAULT_STRIDE = (64, 64, 32)


@dataclass
class InferenceResult:
    fused: ScalarVolume
    p_prox: ScalarVolume
    p_dist: ScalarVolume
    weights: GatingWeights


def _axis_starts(dim: int, window: int, stride: int) -> list[int]:
    if window >= dim:
        return [0]
    starts = list(range(0, dim - window + 1, stride))
    if starts[-1] + window < dim:
        starts.append(dim - window)
    return starts


def fuse(p_branches: tuple[ScalarVolume, ScalarVolume], weights: GatingWeights) -> ScalarVolume:
    """Per-voxel convex combination of the branch outputs."""
    p_prox, p_dist = p_branches
    if p_prox.grid.dims != weights.g_prox.grid.dims or p_dist.grid.dims != p_prox.grid.dims:
        raise ValueError("branch outputs and gating weights must share one grid")
    fused = weights.g_prox.data * p_prox.data + weights.g_dist.data * p_dist.data
    return ScalarVolume(p_prox.grid, fused)


def sliding_window_predict(
    params: SegmenterParams,
    case: CaseRecord,
    window: tuple[int, int, int] = DEFAULT_WINDOW,
    stride: tuple[int, int, int] = DEFAULT_STRIDE,
    mode: str = "sg",
    gating: GatingConfig = GatingConfig(),
) -> InferenceResult:
    """Tile the case, run the segmenter per window, average overlaps, fuse."""
    window = tuple(int(w) for w in window)
    stride = tuple(int(s) for s in stride)
    if any(s < 1 for s in stride) or any(w < s for w, s in zip(window, stride)):
        raise ValueError(f"need window >= stride >= 1, got window={window} stride={stride}")
    dims = case.grid.dims
    eff_window = tuple(min(w, d) for w, d in zip(window, dims))
    starts = [
        _axis_starts(d, w, s) for d, w, s in zip(dims, eff_window, stride)
    ]  # per axis: x, y, z

    shape = case.grid.shape_zyx
    sums = [np.zeros(shape, dtype=np.float64), np.zeros(shape, dtype=np.float64)]
    counts = np.zeros(shape, dtype=np.int32)
    wx, wy, wz = eff_window
    ct, pet, dist = case.ct.data, case.pet.data, case.distance.data
    for z0 in starts[2]:
        for y0 in starts[1]:
            for x0 in starts[0]:
                sl = (slice(z0, z0 + wz), slice(y0, y0 + wy), slice(x0, x0 + wx))
                stack = normalize_input_stack(ct[sl], pet[sl], dist[sl], dtype=params.dtype)
                p_prox, p_dist = forward(params, stack)
                sums[0][sl] += p_prox
                sums[1][sl] += p_dist
                counts[sl] += 1

    if counts.min() < 1:
        raise AssertionError("window tiling left voxels unvisited")
    branch_vols = [
        ScalarVolume(case.grid, (s / counts).astype(np.float32)) for s in sums
    ]
    weights = gate_for_mode(case.distance, mode, gating)
    fused = fuse((branch_vols[0], branch_vols[1]), weights)
    return InferenceResult(fused, branch_vols[0], branch_vols[1], weights)
