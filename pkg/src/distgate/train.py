"""Training loop: crop pool construction, gated SGD steps, logging.

The whole pool of augmented crops is generated up front (deterministically
from the root seed), then steps draw fixed-size batches from a reshuffled
pool order. Per-crop losses and gradients are averaged over the batch.
All randomness descends from one root seed through named spawn keys, so a
run is exactly reproducible from (config, seed).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .gating import GatingConfig
from .loss import gated_nll_core, gated_nll_grad_core
from .model import (
    MomentumSgd,
    SegmenterConfig,
    SegmenterParams,
    backward,
    forward,
    init_params,
)
from .pipeline import CaseRecord, TrainingCrop, sample_crops


@dataclass
class TrainConfig:
    mode: str = "sg"  # single | bg | sg
    steps: int = 200
    batch_crops: int = 4
    lr: float = 0.01
    momentum: float = 0.9
    crop_size: tuple[int, int, int] = (32, 32, 16)
    n_background: int | None = None  # default: one per instance
    max_rotation_deg: float = 10.0
    trunk_channels: tuple[int, ...] = (8, 8)
    seed: int = 0
    gating: GatingConfig = field(default_factory=GatingConfig)

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "steps": self.steps,
            "batch_crops": self.batch_crops,
            "lr": self.lr,
            "momentum": self.momentum,
            "crop_size": list(self.crop_size),
            "n_background": self.n_background,
            "max_rotation_deg": self.max_rotation_deg,
            "trunk_channels": list(self.trunk_channels),
            "seed": self.seed,
            "gating": {
                "d0_mm": self.gating.d0_mm,
                "d_prox_mm": self.gating.d_prox_mm,
                "d_dist_mm": self.gating.d_dist_mm,
            },
        }


def config_from_dict(d: dict) -> TrainConfig:
    gating = GatingConfig(**d.get("gating", {}))
    kwargs = {}
    for key in ("mode", "steps", "batch_crops", "lr", "momentum", "n_background",
                "max_rotation_deg", "seed"):
        if key in d:
            kwargs[key] = d[key]
    if "crop_size" in d:
        kwargs["crop_size"] = tuple(d["crop_size"])
    if "trunk_channels" in d:
        kwargs["trunk_channels"] = tuple(d["trunk_channels"])
    return TrainConfig(gating=gating, **kwargs)


def build_crop_pool(cases: list[CaseRecord], cfg: TrainConfig) -> list[TrainingCrop]:
    """Deterministic pool: per-case crop sampling seeded from the root seed."""
    root = np.random.SeedSequence(cfg.seed)
    case_keys = root.spawn(len(cases))
    pool: list[TrainingCrop] = []
    for case, key in zip(cases, case_keys):
        pool.extend(
            sample_crops(
                case,
                key,
                n_background=cfg.n_background,
                crop_size=cfg.crop_size,
                max_rotation_deg=cfg.max_rotation_deg,
                mode=cfg.mode,
                gating=cfg.gating,
            )
        )
    if not pool:
        raise ValueError("crop pool is empty; no cases or instances to train on")
    return pool


def crop_loss_and_grads(params: SegmenterParams, crop: TrainingCrop):
    """Loss and parameter gradients of one crop."""
    x = crop.inputs.astype(params.dtype, copy=False)
    p_prox, p_dist, cache = forward(params, x, keep_cache=True)
    y = crop.labels
    gs = crop.weights
    loss = gated_nll_core([p_prox, p_dist], y, gs)
    grad_logits = gated_nll_grad_core([p_prox, p_dist], y, gs)
    grads = backward(params, x, (grad_logits[0], grad_logits[1]), cache=cache)
    return loss, grads


@dataclass
class TrainResult:
    params: SegmenterParams
    history: list[tuple[int, float]]  # (step, batch loss)

    @property
    def first_loss(self) -> float:
        return self.history[0][1]

    @property
    def last_loss(self) -> float:
        return self.history[-1][1]


def train(pool: list[TrainingCrop], cfg: TrainConfig,
          params: SegmenterParams | None = None) -> TrainResult:
    """Run the configured number of batch steps over a crop pool."""
    if params is None:
        params = init_params(
            SegmenterConfig(in_channels=3, trunk_channels=cfg.trunk_channels, seed=cfg.seed)
        )
    order_rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence((cfg.seed, 0xD06)))
    )
    optimizer = MomentumSgd(cfg.lr, cfg.momentum)
    history = []
    queue: list[int] = []
    for step in range(1, cfg.steps + 1):
        batch = []
        for _ in range(cfg.batch_crops):
            if not queue:
                queue = list(order_rng.permutation(len(pool)))
            batch.append(queue.pop())
        loss_sum = 0.0
        grad_sum: list[np.ndarray] | None = None
        for idx in batch:
            loss, grads = crop_loss_and_grads(params, pool[idx])
            loss_sum += loss
            if grad_sum is None:
                grad_sum = [g.astype(np.float64) for g in grads]
            else:
                for acc, g in zip(grad_sum, grads):
                    acc += g
        scale = 1.0 / len(batch)
        mean_grads = [(g * scale).astype(params.dtype) for g in grad_sum]
        optimizer.step(params, mean_grads)
        history.append((step, loss_sum * scale))
    return TrainResult(params=params, history=history)


def save_history_csv(history: list[tuple[int, float]], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for step, loss in history:
            writer.writerow([step, repr(loss)])
