"""Training-sample construction: case preparation, crops, augmentation.

``prepare_case`` resamples all channels of a raw case onto a common target
grid and attaches the tumor distance map.  ``sample_crops`` produces one
crop per ground-truth instance plus random background crops, each rotated
in-plane by a random angle; the gating weights of a crop are recomputed
from its rotated distance channel, which keeps the gating semantics exact
after augmentation (interpolating precomputed weights would not).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .edt import DistanceMap, edt_exact
from .gating import GatingConfig, gate_for_mode
from .model import normalize_input_stack
from .volume import (
    BinaryMask,
    LabelVolume,
    ScalarVolume,
    VolumeGrid,
    crop_subvolume,
    load_volume,
    resample_nearest,
    resample_trilinear,
    rotate_xy,
)

TARGET_SPACING = (1.0, 1.0, 2.5)
DEFAULT_CROP_SIZE = (96, 96, 64)


@dataclass
class CaseRecord:
    """One prepared case: all channels share a single grid."""

    case_id: str
    ct: ScalarVolume
    pet: ScalarVolume
    tumor: BinaryMask
    gtvln: LabelVolume
    distance: DistanceMap

    def __post_init__(self):
        dims = self.ct.grid.dims
        for name in ("pet", "tumor", "gtvln", "distance"):
            if getattr(self, name).grid.dims != dims:
                raise ValueError(f"channel '{name}' is not on the shared case grid")
        if not self.tumor.data.any():
            raise ValueError("case has an empty tumor mask")

    @property
    def grid(self) -> VolumeGrid:
        return self.ct.grid

    def foreground(self) -> BinaryMask:
        """Ground-truth foreground: any node instance (tumor excluded)."""
        return BinaryMask(self.grid, self.gtvln.data > 0)


@dataclass
class TrainingCrop:
    """One augmented training sample."""

    inputs: np.ndarray  # (3, nz, ny, nx) float32, normalized channels
    labels: np.ndarray  # (nz, ny, nx) bool
    dist_mm: np.ndarray  # (nz, ny, nx) float32 rotated distance channel
    weights: tuple[np.ndarray, np.ndarray]  # (g_prox, g_dist) float32
    spacing: tuple[float, float, float] = TARGET_SPACING
    case_id: str = ""
    center: tuple[int, int, int] = (0, 0, 0)
    angle_deg: float = 0.0


def prepare_case(
    case_id: str,
    ct: ScalarVolume,
    pet: ScalarVolume,
    tumor: BinaryMask,
    gtvln: LabelVolume,
    target_spacing: tuple[float, float, float] = TARGET_SPACING,
) -> CaseRecord:
    """Resample all channels to the target spacing and attach the tumor EDT."""
    if not tumor.data.any():
        raise ValueError("cannot prepare a case with an empty tumor mask")
    target = tuple(float(t) for t in target_spacing)
    if ct.grid.spacing != target:
        ct = resample_trilinear(ct, target)
    if pet.grid.spacing != target:
        pet = resample_trilinear(pet, target)
    if tumor.grid.spacing != target:
        tumor = resample_nearest(tumor, target)
    if gtvln.grid.spacing != target:
        gtvln = resample_nearest(gtvln, target)
    dims = ct.grid.dims
    for name, vol in (("pet", pet), ("tumor", tumor), ("gtvln", gtvln)):
        if vol.grid.dims != dims:
            raise ValueError(f"'{name}' dims {vol.grid.dims} mismatch CT dims {dims}")
    distance = edt_exact(tumor)
    return CaseRecord(case_id, ct, pet, tumor, gtvln, distance)


def load_case_dir(case_dir: str | Path, case_id: str | None = None,
                  target_spacing: tuple[float, float, float] = TARGET_SPACING) -> CaseRecord:
    """Load ct/pet/tumor/gtvln volume pairs from a case directory."""
    case_dir = Path(case_dir)
    return prepare_case(
        case_id or case_dir.name,
        load_volume(case_dir / "ct"),
        load_volume(case_dir / "pet"),
        load_volume(case_dir / "tumor"),
        load_volume(case_dir / "gtvln"),
        target_spacing,
    )


def instance_centroids(gtvln: LabelVolume) -> list[tuple[int, int, int]]:
    """Per-instance centroid snapped to the nearest voxel of that instance.

    Returned as (x, y, z) voxel indices, one per instance id 1..K.
    """
    centers = []
    spacing_zyx = np.array(gtvln.grid.spacing[::-1])
    for k in range(1, gtvln.num_instances + 1):
        vox = np.argwhere(gtvln.data == k)  # (n, 3) zyx
        mean = vox.mean(axis=0)
        offsets = (vox - mean) * spacing_zyx
        snapped = vox[np.argmin((offsets**2).sum(axis=1))]
        centers.append((int(snapped[2]), int(snapped[1]), int(snapped[0])))
    return centers


def sample_crops(
    case: CaseRecord,
    seed,
    n_background: int | None = None,
    crop_size: tuple[int, int, int] = DEFAULT_CROP_SIZE,
    max_rotation_deg: float = 10.0,
    mode: str = "sg",
    gating: GatingConfig = GatingConfig(),
) -> list[TrainingCrop]:
    """One crop per instance centroid plus uniform-random background crops.

    Every crop is independently rotated in-plane by an angle drawn from
    uniform(-max_rotation_deg, +max_rotation_deg); deterministic per
    (case, seed).
    """
    if not isinstance(seed, np.random.SeedSequence):
        seed = np.random.SeedSequence(seed)
    rng = np.random.Generator(np.random.Philox(seed))
    centers = instance_centroids(case.gtvln)
    if n_background is None:
        n_background = len(centers)
    nx, ny, nz = case.grid.dims
    for _ in range(n_background):
        centers.append(
            (
                int(rng.integers(0, nx)),
                int(rng.integers(0, ny)),
                int(rng.integers(0, nz)),
            )
        )
    foreground = case.foreground()
    crops = []
    for center in centers:
        angle = float(rng.uniform(-max_rotation_deg, max_rotation_deg))
        crops.append(_build_crop(case, foreground, center, crop_size, angle, mode, gating))
    return crops


def _build_crop(
    case: CaseRecord,
    foreground: BinaryMask,
    center: tuple[int, int, int],
    crop_size: tuple[int, int, int],
    angle_deg: float,
    mode: str,
    gating: GatingConfig,
) -> TrainingCrop:
    ct = rotate_xy(crop_subvolume(case.ct, center, crop_size), angle_deg)
    pet = rotate_xy(crop_subvolume(case.pet, center, crop_size), angle_deg)
    dist = rotate_xy(crop_subvolume(case.distance.as_scalar(), center, crop_size), angle_deg)
    labels = rotate_xy(crop_subvolume(foreground, center, crop_size), angle_deg)
    dist_map = DistanceMap(dist.grid, dist.data)
    weights = gate_for_mode(dist_map, mode, gating)
    inputs = normalize_input_stack(ct.data, pet.data, dist.data)
    return TrainingCrop(
        inputs=inputs,
        labels=labels.data,
        dist_mm=dist.data,
        weights=(weights.g_prox.data, weights.g_dist.data),
        spacing=case.grid.spacing,
        case_id=case.case_id,
        center=tuple(center),
        angle_deg=angle_deg,
    )


def regate_crop(crop: TrainingCrop, mode: str, gating: GatingConfig) -> TrainingCrop:
    """Same crop with gating weights rebuilt for a different mode."""
    grid = VolumeGrid(
        (crop.dist_mm.shape[2], crop.dist_mm.shape[1], crop.dist_mm.shape[0]),
        crop.spacing,
    )
    weights = gate_for_mode(DistanceMap(grid, crop.dist_mm), mode, gating)
    return TrainingCrop(
        inputs=crop.inputs,
        labels=crop.labels,
        dist_mm=crop.dist_mm,
        weights=(weights.g_prox.data, weights.g_dist.data),
        spacing=crop.spacing,
        case_id=crop.case_id,
        center=crop.center,
        angle_deg=crop.angle_deg,
    )


def load_manifest(path: str | Path) -> dict:
    path = Path(path)
    with open(path) as fh:
        manifest = json.load(fh)
    if "cases" not in manifest:
        raise ValueError(f"{path} is not a dataset manifest (no 'cases' field)")
    manifest["_root"] = str(path.parent)
    return manifest


def manifest_cases(manifest: dict, split: str | None = None) -> list[dict]:
    cases = manifest["cases"]
    if split is not None:
        cases = [c for c in cases if c["split"] == split]
    return cases


def load_split(manifest: dict, split: str | None = None) -> list[CaseRecord]:
    root = Path(manifest["_root"])
    return [load_case_dir(root / c["path"], c["case_id"]) for c in manifest_cases(manifest, split)]
