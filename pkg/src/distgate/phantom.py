"""Deterministic synthetic case generator.

Each case contains an ellipsoidal primary-tumor blob near the volume center
and a set of spherical lymph-node-like blobs placed by rejection sampling
into distance bands relative to the tumor (proximal, mid, distal).  The CT
channel carries additive contrast for tumor and nodes over Gaussian noise;
the PET channel is hot on the tumor and on most nodes, with a configurable
miss rate (nodes without PET signal) and spurious hot spots that mimic PET
false positives.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .edt import edt_exact
from .pipeline import CaseRecord
from .volume import BinaryMask, LabelVolume, ScalarVolume, VolumeGrid, save_volume

PROXIMAL_MAX_MM = 50.0
DISTAL_MIN_MM = 90.0


@dataclass(frozen=True)
class PhantomConfig:
    dims: tuple[int, int, int] = (160, 160, 56)
    spacing: tuple[float, float, float] = (1.0, 1.0, 2.5)
    tumor_semi_axes_mm: tuple[float, float] = (10.0, 16.0)  # per-axis uniform range
    n_nodes: int = 5
    prox_fraction: float = 0.4
    dist_fraction: float = 0.2
    node_radius_mm: tuple[float, float] = (5.0, 9.0)
    ct_tumor_contrast: float = 1.0
    ct_node_contrast: float = 0.8
    ct_noise_sigma: float = 0.08
    pet_signal: float = 2.0
    pet_noise_sigma: float = 0.05
    pet_miss_rate: float = 0.1  # fraction of nodes with no PET signal
    pet_hotspots: int = 1  # spurious PET-only blobs per case
    hotspot_radius_mm: tuple[float, float] = (4.0, 7.0)
    max_attempts: int = 5000

    def node_band_counts(self) -> tuple[int, int, int]:
        """(proximal, mid, distal) node counts derived from the fractions."""
        n_prox = int(round(self.n_nodes * self.prox_fraction))
        n_dist = int(round(self.n_nodes * self.dist_fraction))
        n_prox = min(n_prox, self.n_nodes)
        n_dist = min(n_dist, self.n_nodes - n_prox)
        return n_prox, self.n_nodes - n_prox - n_dist, n_dist


def _rng_from(seed) -> np.random.Generator:
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    return np.random.Generator(np.random.Philox(seed))


def _physical_axes(grid: VolumeGrid) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    nx, ny, nz = grid.dims
    sx, sy, sz = grid.spacing
    return (
        np.arange(nz, dtype=np.float64) * sz,
        np.arange(ny, dtype=np.float64) * sy,
        np.arange(nx, dtype=np.float64) * sx,
    )


def _paint_ellipsoid(target: np.ndarray, grid: VolumeGrid, center_mm, semi_axes_mm, value) -> None:
    """Set voxels inside the axis-aligned ellipsoid; works on a bounding box."""
    sx, sy, sz = grid.spacing
    cx, cy, cz = center_mm
    ax, ay, az = semi_axes_mm
    nx, ny, nz = grid.dims
    x_lo = max(0, int(np.floor((cx - ax) / sx)))
    x_hi = min(nx, int(np.ceil((cx + ax) / sx)) + 1)
    y_lo = max(0, int(np.floor((cy - ay) / sy)))
    y_hi = min(ny, int(np.ceil((cy + ay) / sy)) + 1)
    z_lo = max(0, int(np.floor((cz - az) / sz)))
    z_hi = min(nz, int(np.ceil((cz + az) / sz)) + 1)
    zs = (np.arange(z_lo, z_hi) * sz - cz) / az
    ys = (np.arange(y_lo, y_hi) * sy - cy) / ay
    xs = (np.arange(x_lo, x_hi) * sx - cx) / ax
    inside = (
        zs[:, None, None] ** 2 + ys[None, :, None] ** 2 + xs[None, None, :] ** 2
    ) <= 1.0
    box = target[z_lo:z_hi, y_lo:y_hi, x_lo:x_hi]
    box[inside] = value


def generate_case(seed, config: PhantomConfig = PhantomConfig(), case_id: str = "case") -> CaseRecord:
    """Build one fully deterministic synthetic case."""
    cfg = config
    grid = VolumeGrid(cfg.dims, cfg.spacing)
    extent = tuple((d - 1) * s for d, s in zip(cfg.dims, cfg.spacing))
    rng = _rng_from(seed)

    lo, hi = cfg.tumor_semi_axes_mm
    if lo < 2 * max(cfg.spacing):
        raise ValueError("tumor semi-axes must span at least 2 voxels per axis")
    semi_axes = rng.uniform(lo, hi, size=3)
    center = np.array([e / 2.0 for e in extent]) + rng.uniform(-5.0, 5.0, size=3)

    tumor_arr = np.zeros(grid.shape_zyx, dtype=bool)
    _paint_ellipsoid(tumor_arr, grid, center, semi_axes, True)
    tumor = BinaryMask(grid, tumor_arr)
    distance = edt_exact(tumor)

    r_lo, r_hi = cfg.node_radius_mm
    if r_lo < 2 * max(cfg.spacing):
        raise ValueError("node radii must span at least 2 voxels per axis")
    n_prox, n_mid, n_dist = config.node_band_counts()
    bands = (
        [(None, PROXIMAL_MAX_MM)] * n_prox
        + [(PROXIMAL_MAX_MM, DISTAL_MIN_MM)] * n_mid
        + [(DISTAL_MIN_MM, None)] * n_dist
    )
    buffer_mm = 2.0 * max(cfg.spacing)
    placed: list[tuple[np.ndarray, float]] = []  # (center_mm xyz, radius)
    labels = np.zeros(grid.shape_zyx, dtype=np.uint32)
    sx, sy, sz = cfg.spacing
    for idx, (band_lo, band_hi) in enumerate(bands, start=1):
        for attempt in range(cfg.max_attempts):
            radius = rng.uniform(r_lo, r_hi)
            c = np.array([rng.uniform(radius, e - radius) for e in extent])
            vox = (int(round(c[2] / sz)), int(round(c[1] / sy)), int(round(c[0] / sx)))
            d_center = float(distance.data[vox])
            lo_ok = d_center >= (band_lo if band_lo is not None else radius + buffer_mm)
            hi_ok = band_hi is None or d_center <= band_hi
            if not (lo_ok and hi_ok and d_center >= radius + buffer_mm):
                continue
            if any(
                np.linalg.norm(c - pc) < radius + pr + buffer_mm for pc, pr in placed
            ):
                continue
            placed.append((c, radius))
            _paint_ellipsoid(labels, grid, c, (radius, radius, radius), np.uint32(idx))
            break
        else:
            raise RuntimeError(
                f"failed to place node {idx} in band ({band_lo}, {band_hi}) after "
                f"{cfg.max_attempts} attempts; enlarge the volume or relax the bands"
            )

    gtvln = LabelVolume(grid, labels)
    node_any = labels > 0

    ct = rng.normal(0.0, cfg.ct_noise_sigma, size=grid.shape_zyx)
    ct[tumor_arr] += cfg.ct_tumor_contrast
    ct[node_any] += cfg.ct_node_contrast

    pet = rng.normal(0.0, cfg.pet_noise_sigma, size=grid.shape_zyx)
    pet[tumor_arr] += cfg.pet_signal
    for idx in range(1, gtvln.num_instances + 1):
        if rng.random() >= cfg.pet_miss_rate:
            pet[labels == idx] += cfg.pet_signal
    for _ in range(cfg.pet_hotspots):
        for attempt in range(cfg.max_attempts):
            radius = rng.uniform(*cfg.hotspot_radius_mm)
            c = np.array([rng.uniform(radius, e - radius) for e in extent])
            if any(np.linalg.norm(c - pc) < radius + pr + buffer_mm for pc, pr in placed):
                continue
            vox = (int(round(c[2] / sz)), int(round(c[1] / sy)), int(round(c[0] / sx)))
            if float(distance.data[vox]) < radius + buffer_mm:
                continue  # keep hot spots off the tumor
            spot = np.zeros(grid.shape_zyx, dtype=bool)
            _paint_ellipsoid(spot, grid, c, (radius, radius, radius), True)
            pet[spot] += cfg.pet_signal
            break
        else:
            raise RuntimeError("failed to place a PET hot spot; volume too crowded")

    return CaseRecord(
        case_id=case_id,
        ct=ScalarVolume(grid, ct.astype(np.float32)),
        pet=ScalarVolume(grid, pet.astype(np.float32)),
        tumor=tumor,
        gtvln=gtvln,
        distance=distance,
    )


def split_counts(n_cases: int, fractions: tuple[float, float, float]) -> tuple[int, int, int]:
    """(train, val, test) sizes: floor val/test, remainder goes to train."""
    f_train, f_val, f_test = fractions
    if abs(f_train + f_val + f_test - 1.0) > 1e-9:
        raise ValueError("split fractions must sum to 1")
    n_val = int(np.floor(n_cases * f_val))
    n_test = int(np.floor(n_cases * f_test))
    return n_cases - n_val - n_test, n_val, n_test


def generate_dataset(
    seed: int,
    n_cases: int,
    out_dir: str | Path,
    fractions: tuple[float, float, float] = (0.6, 0.1, 0.3),
    config: PhantomConfig = PhantomConfig(),
) -> dict:
    """Write ``n_cases`` cases plus a manifest with a deterministic split."""
    if n_cases < 3:
        raise ValueError("need at least 3 cases to populate all splits")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(seed)
    case_seeds = root.spawn(n_cases + 1)
    split_rng = np.random.Generator(np.random.Philox(case_seeds[-1]))

    n_train, n_val, n_test = split_counts(n_cases, fractions)
    order = split_rng.permutation(n_cases)
    split_of = {}
    for rank, case_idx in enumerate(order):
        if rank < n_train:
            split_of[case_idx] = "train"
        elif rank < n_train + n_val:
            split_of[case_idx] = "val"
        else:
            split_of[case_idx] = "test"

    entries = []
    for i in range(n_cases):
        case_id = f"case_{i:03d}"
        case = generate_case(case_seeds[i], config, case_id=case_id)
        case_dir = out_dir / case_id
        save_case(case, case_dir)
        entries.append({"case_id": case_id, "path": case_id, "split": split_of[i]})

    manifest = {
        "seed": seed,
        "fractions": list(fractions),
        "config": _config_dict(config),
        "cases": entries,
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest


def save_case(case: CaseRecord, case_dir: str | Path) -> None:
    case_dir = Path(case_dir)
    save_volume(case.ct, case_dir / "ct")
    save_volume(case.pet, case_dir / "pet")
    save_volume(case.tumor, case_dir / "tumor")
    save_volume(case.gtvln, case_dir / "gtvln")


def _config_dict(config: PhantomConfig) -> dict:
    d = asdict(config)
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in d.items()}


def config_from_dict(d: dict) -> PhantomConfig:
    kwargs = {}
    for f in PhantomConfig.__dataclass_fields__.values():
        if f.name in d:
            v = d[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    return PhantomConfig(**kwargs)
