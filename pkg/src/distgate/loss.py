"""Gated two-branch negative log-likelihood and its analytic gradient.

The loss is the per-voxel binary NLL of each branch, weighted by that
branch's gating weight, summed over branches and voxels and normalized by
the voxel count.  Because the branch weights sum to one at every voxel, a
perfectly confident correct prediction drives the loss to (clamped) zero.

The ``*_core`` functions operate on plain arrays in any float precision
(the training loop runs them on float32 data, the gradient verification on
float64); the wrapper functions take the volume types.  Loss reductions
always accumulate in float64.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gating import GatingWeights
from .volume import BinaryMask, ScalarVolume

PROB_EPS = 1e-7


@dataclass
class GatedLossInput:
    """Branch probabilities, labels and gating weights on one shared grid."""

    probs: tuple[ScalarVolume, ScalarVolume]  # (proximal, distal) foreground probabilities
    labels: BinaryMask
    weights: GatingWeights

    def __post_init__(self):
        grid = self.labels.grid
        for p in self.probs:
            if p.grid.dims != grid.dims:
                raise ValueError("probability volumes must share the label grid")
        if self.weights.g_prox.grid.dims != grid.dims:
            raise ValueError("gating weights must share the label grid")

    def _arrays(self):
        y = self.labels.data.astype(np.float64)
        gs = (self.weights.g_prox.data, self.weights.g_dist.data)
        return [p.data for p in self.probs], y, gs


def gated_nll_core(
    probs: Sequence[np.ndarray], labels: np.ndarray, weights: Sequence[np.ndarray]
) -> float:
    """Mean gated NLL over all voxels and branches, accumulated in float64."""
    y = np.asarray(labels, dtype=np.float64)
    n = y.size
    total = 0.0
    for g, p in zip(weights, probs):
        p = np.clip(np.asarray(p, dtype=np.float64), PROB_EPS, 1.0 - PROB_EPS)
        g = np.asarray(g, dtype=np.float64)
        total += float(np.sum(g * (y * np.log(p) + (1.0 - y) * np.log1p(-p))))
    return -total / n


def gated_nll_grad_core(
    probs: Sequence[np.ndarray], labels: np.ndarray, weights: Sequence[np.ndarray]
) -> list[np.ndarray]:
    """Gradient of the gated NLL with respect to each branch's logits.

    With probabilities from a logistic link the per-voxel gradient for
    branch m is g_m * (p_m - y) / N.  Each returned array keeps the dtype
    of the corresponding probability array so the backward pass stays in
    the caller's precision.
    """
    grads = []
    for g, p in zip(weights, probs):
        p = np.asarray(p)
        dtype = p.dtype if np.issubdtype(p.dtype, np.floating) else np.float64
        y = np.asarray(labels, dtype=dtype)
        grads.append((np.asarray(g, dtype=dtype) * (p - y) / p.size).astype(dtype))
    return grads


def gated_nll(inp: GatedLossInput) -> float:
    """Volume-level wrapper around ``gated_nll_core``."""
    ps, y, gs = inp._arrays()
    return gated_nll_core(ps, y, gs)


def gated_nll_grad(inp: GatedLossInput) -> tuple[np.ndarray, np.ndarray]:
    """Volume-level wrapper; returns float64 (nz, ny, nx) arrays per branch."""
    ps, y, gs = inp._arrays()
    g_prox, g_dist = gated_nll_grad_core(
        [p.astype(np.float64) for p in ps], y, gs
    )
    return g_prox, g_dist
