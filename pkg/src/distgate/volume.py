"""Core 3D grid/volume types, file I/O, resampling, cropping and rotation.

Conventions used across the whole package:

* A volume is described by ``VolumeGrid`` with ``dims = (nx, ny, nz)``,
  ``spacing`` in mm and ``origin`` in mm.
* Voxel data is held in a numpy array of shape ``(nz, ny, nx)`` in C order,
  so the flat index of voxel ``(x, y, z)`` is ``x + nx * (y + ny * z)``
  (x-fastest).  The on-disk raw payload uses exactly this layout.
* The physical coordinate of voxel ``(x, y, z)`` is
  ``origin + (x * sx, y * sy, z * sz)``; interpolation samples at voxel
  centers.
* A volume on disk is a pair ``<name>.json`` (header) + ``<name>.raw``
  (little-endian payload).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import map_coordinates

_DTYPE_CODES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1"), "u32": np.dtype("<u4")}


@dataclass(frozen=True)
class VolumeGrid:
    """Geometry of a regular anisotropic 3D grid."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ValueError("dims, spacing and origin must be triples")
        if any(d < 1 for d in dims):
            raise ValueError(f"all dims must be >= 1, got {dims}")
        if any(s <= 0 for s in spacing):
            raise ValueError(f"all spacings must be > 0, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def voxel_count(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def shape_zyx(self) -> tuple[int, int, int]:
        """Numpy array shape corresponding to the x-fastest layout."""
        nx, ny, nz = self.dims
        return (nz, ny, nx)

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz


def _check_data(grid: VolumeGrid, data: np.ndarray, dtype: np.dtype, kind: str) -> np.ndarray:
    data = np.asarray(data)
    if data.shape != grid.shape_zyx:
        raise ValueError(
            f"{kind} data shape {data.shape} does not match grid (nz,ny,nx) {grid.shape_zyx}"
        )
    if data.dtype != dtype:
        data = data.astype(dtype)
    return np.ascontiguousarray(data)


@dataclass
class ScalarVolume:
    """Float32 voxel data on a grid (images, probability maps)."""

    grid: VolumeGrid
    data: np.ndarray  # (nz, ny, nx) float32

    def __post_init__(self):
        self.data = _check_data(self.grid, self.data, np.dtype(np.float32), "ScalarVolume")
        if not np.isfinite(self.data).all():
            raise ValueError("ScalarVolume data must be finite")


@dataclass
class BinaryMask:
    """Boolean voxel data on a grid (tumor mask, ground-truth foreground)."""

    grid: VolumeGrid
    data: np.ndarray  # (nz, ny, nx) bool

    def __post_init__(self):
        self.data = _check_data(self.grid, self.data, np.dtype(bool), "BinaryMask")


@dataclass
class LabelVolume:
    """Non-negative instance labels: 0 = background, k > 0 = instance id.

    Instance ids must form a contiguous set {1..K} with every instance
    non-empty.
    """

    grid: VolumeGrid
    data: np.ndarray  # (nz, ny, nx) uint32

    def __post_init__(self):
        data = np.asarray(self.data)
        if np.issubdtype(data.dtype, np.signedinteger) and data.min(initial=0) < 0:
            raise ValueError("LabelVolume labels must be non-negative")
        self.data = _check_data(self.grid, data, np.dtype(np.uint32), "LabelVolume")
        ids = np.unique(self.data)
        ids = ids[ids > 0]
        k = len(ids)
        if k and (ids[0] != 1 or ids[-1] != k):
            raise ValueError(f"instance ids must be contiguous 1..K, got {ids.tolist()}")

    @property
    def num_instances(self) -> int:
        return int(self.data.max(initial=0))


Volume = ScalarVolume | BinaryMask | LabelVolume

_KIND_TO_CODE = {ScalarVolume: "f32", BinaryMask: "u8", LabelVolume: "u32"}


def load_volume(path: str | Path) -> Volume:
    """Load a volume from a ``<name>.json`` + ``<name>.raw`` pair.

    ``path`` may point at either file of the pair or at the bare prefix.
    The dtype code selects the returned type: f32 -> ScalarVolume,
    u8 -> BinaryMask, u32 -> LabelVolume.
    """
    header_path, raw_path = _pair_paths(path)
    if not header_path.exists():
        raise FileNotFoundError(f"missing volume header {header_path}")
    if not raw_path.exists():
        raise FileNotFoundError(f"missing volume payload {raw_path}")
    with open(header_path) as fh:
        header = json.load(fh)
    for key in ("dims", "spacing_mm", "dtype"):
        if key not in header:
            raise ValueError(f"volume header {header_path} missing field '{key}'")
    code = header["dtype"]
    if code not in _DTYPE_CODES:
        raise ValueError(f"unknown dtype '{code}' in {header_path}")
    grid = VolumeGrid(
        tuple(header["dims"]),
        tuple(header["spacing_mm"]),
        tuple(header.get("origin_mm", (0.0, 0.0, 0.0))),
    )
    dtype = _DTYPE_CODES[code]
    expected = grid.voxel_count * dtype.itemsize
    payload = raw_path.read_bytes()
    if len(payload) != expected:
        raise ValueError(
            f"payload size mismatch for {raw_path}: expected {expected} bytes, got {len(payload)}"
        )
    flat = np.frombuffer(payload, dtype=dtype)
    data = flat.reshape(grid.shape_zyx).copy()
    if code == "f32":
        return ScalarVolume(grid, data.astype(np.float32))
    if code == "u8":
        return BinaryMask(grid, data.astype(bool))
    return LabelVolume(grid, data)


def save_volume(volume: Volume, path: str | Path) -> None:
    """Write the ``<name>.json`` + ``<name>.raw`` pair; round-trips bit-exactly."""
    header_path, raw_path = _pair_paths(path)
    code = _KIND_TO_CODE[type(volume)]
    grid = volume.grid
    header = {
        "dims": list(grid.dims),
        "spacing_mm": list(grid.spacing),
        "origin_mm": list(grid.origin),
        "dtype": code,
    }
    header_path.parent.mkdir(parents=True, exist_ok=True)
    with open(header_path, "w") as fh:
        json.dump(header, fh, indent=2)
        fh.write("\n")
    payload = np.ascontiguousarray(volume.data.astype(_DTYPE_CODES[code], copy=False))
    raw_path.write_bytes(payload.tobytes())


def _pair_paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".raw")


def _target_dims(grid: VolumeGrid, target_spacing: tuple[float, float, float]) -> tuple[int, ...]:
    return tuple(
        int(np.ceil(d * s / t)) for d, s, t in zip(grid.dims, grid.spacing, target_spacing)
    )


def _resample_coords(grid: VolumeGrid, target_spacing, out_dims) -> np.ndarray:
    """Continuous source indices (3, nz, ny, nx) of the output voxel centers."""
    axes = []
    for d_out, s_in, t in zip(out_dims, grid.spacing, target_spacing):
        axes.append(np.arange(d_out, dtype=np.float64) * (t / s_in))
    ax_x, ax_y, ax_z = axes
    cz, cy, cx = np.meshgrid(ax_z, ax_y, ax_x, indexing="ij")
    return np.stack([cz, cy, cx])


def resample_trilinear(v: ScalarVolume, target_spacing: tuple[float, float, float]) -> ScalarVolume:
    """Resample a scalar volume to a new spacing with trilinear interpolation.

    Output dims are ``ceil(dim * spacing / target)`` per axis; out-of-bounds
    samples clamp to the nearest edge voxel.
    """
    target_spacing = tuple(float(t) for t in target_spacing)
    if any(t <= 0 for t in target_spacing):
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    out_dims = _target_dims(v.grid, target_spacing)
    coords = _resample_coords(v.grid, target_spacing, out_dims)
    out = map_coordinates(v.data.astype(np.float64), coords, order=1, mode="nearest")
    grid = VolumeGrid(out_dims, target_spacing, v.grid.origin)
    return ScalarVolume(grid, out.astype(np.float32))


def resample_nearest(v: BinaryMask | LabelVolume, target_spacing: tuple[float, float, float]):
    """Nearest-neighbor resampling for masks and label volumes."""
    target_spacing = tuple(float(t) for t in target_spacing)
    if any(t <= 0 for t in target_spacing):
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    out_dims = _target_dims(v.grid, target_spacing)
    coords = _resample_coords(v.grid, target_spacing, out_dims)
    grid = VolumeGrid(out_dims, target_spacing, v.grid.origin)
    if isinstance(v, BinaryMask):
        out = map_coordinates(v.data.astype(np.uint8), coords, order=0, mode="nearest")
        return BinaryMask(grid, out.astype(bool))
    out = map_coordinates(v.data, coords, order=0, mode="nearest")
    return LabelVolume(grid, out)


def crop_subvolume(v: Volume, center: tuple[int, int, int], size: tuple[int, int, int]):
    """Extract a ``size``-shaped window centered at voxel index ``center``.

    The window covers ``[center - size//2, center - size//2 + size)`` per
    axis; regions outside the volume are zero/False padded.  Spacing is
    copied from the input grid and the origin is shifted to the window start.
    """
    size = tuple(int(s) for s in size)
    if any(s < 1 for s in size):
        raise ValueError(f"crop size must be >= 1 per axis, got {size}")
    center = tuple(int(c) for c in center)
    start = [c - s // 2 for c, s in zip(center, size)]

    out = np.zeros((size[2], size[1], size[0]), dtype=v.data.dtype)
    src_lo = [max(0, st) for st in start]
    src_hi = [min(d, st + s) for d, st, s in zip(v.grid.dims, start, size)]
    if all(lo < hi for lo, hi in zip(src_lo, src_hi)):
        dst_lo = [lo - st for lo, st in zip(src_lo, start)]
        dst_hi = [hi - st for hi, st in zip(src_hi, start)]
        out[dst_lo[2]:dst_hi[2], dst_lo[1]:dst_hi[1], dst_lo[0]:dst_hi[0]] = v.data[
            src_lo[2]:src_hi[2], src_lo[1]:src_hi[1], src_lo[0]:src_hi[0]
        ]
    origin = tuple(
        o + st * sp for o, st, sp in zip(v.grid.origin, start, v.grid.spacing)
    )
    grid = VolumeGrid(size, v.grid.spacing, origin)
    if isinstance(v, LabelVolume):
        # A crop may cut away whole instances; relabel to stay contiguous.
        return LabelVolume(grid, _compact_labels(out))
    return type(v)(grid, out)


MAX_ROTATION_DEG = 45.0


def rotate_xy(v: Volume, angle_deg: float):
    """Rotate every z-slice about the slice center in physical coordinates.

    Positive angles rotate counter-clockwise in the (x, y) index plane.
    Scalar volumes use bilinear interpolation, masks and labels nearest
    neighbor; samples falling outside the slice become 0/False.
    """
    if abs(angle_deg) > MAX_ROTATION_DEG:
        raise ValueError(f"|angle| must be <= {MAX_ROTATION_DEG} deg, got {angle_deg}")
    nx, ny, nz = v.grid.dims
    sx, sy, _ = v.grid.spacing
    theta = np.deg2rad(angle_deg)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    cx, cy = (nx - 1) / 2.0, (ny - 1) / 2.0

    xs = (np.arange(nx, dtype=np.float64) - cx) * sx
    ys = (np.arange(ny, dtype=np.float64) - cy) * sy
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    # Inverse map: rotate output physical offsets by -angle to find sources.
    src_x = (cos_t * gx + sin_t * gy) / sx + cx
    src_y = (-sin_t * gx + cos_t * gy) / sy + cy

    coords = np.empty((3, nz, ny, nx), dtype=np.float64)
    coords[0] = np.arange(nz, dtype=np.float64)[:, None, None]
    coords[1] = src_y[None, :, :]
    coords[2] = src_x[None, :, :]

    if isinstance(v, ScalarVolume):
        out = map_coordinates(v.data.astype(np.float64), coords, order=1, mode="constant", cval=0.0)
        return ScalarVolume(v.grid, out.astype(np.float32))
    if isinstance(v, BinaryMask):
        out = map_coordinates(v.data.astype(np.uint8), coords, order=0, mode="constant", cval=0)
        return BinaryMask(v.grid, out.astype(bool))
    out = map_coordinates(v.data, coords, order=0, mode="constant", cval=0)
    # Rotation can drop instances at slice corners; relabel to stay contiguous.
    return LabelVolume(v.grid, _compact_labels(out))


def _compact_labels(labels: np.ndarray) -> np.ndarray:
    ids = np.unique(labels)
    ids = ids[ids > 0]
    if len(ids) == 0 or (ids[0] == 1 and ids[-1] == len(ids)):
        return labels
    lut = np.zeros(int(ids[-1]) + 1, dtype=labels.dtype)
    lut[ids] = np.arange(1, len(ids) + 1, dtype=labels.dtype)
    return lut[labels]
