"""
Scene File Formats

Handles:
- VG3SVOX1 voxel-grid files (u8 labels, 255 = empty)
- VG3SGAU1 Gaussian-set files (f32 records)
- ASCII PLY export of occupied voxels with a fixed class palette
"""

import struct
from pathlib import Path

import numpy as np
from plyfile import PlyData, PlyElement

from src.gaussian_scene import GaussianSet, GridSpec, VoxelGrid

VOXEL_MAGIC = b"VG3SVOX1"
GAUSSIAN_MAGIC = b"VG3SGAU1"
_VOXEL_HEADER = struct.Struct("<8s4I3ff")
_GAUSSIAN_HEADER = struct.Struct("<8sII")
EMPTY_BYTE = 255
MAX_VOXELS = 1 << 31
MAX_CLASSES = 254
PLY_VERTEX_DTYPE = [("x", "f4"), ("y", "f4"), ("z", "f4"),
                    ("red", "u1"), ("green", "u1"), ("blue", "u1")]

# RGB per class index; classes beyond the palette wrap around.
CLASS_PALETTE = np.array([
    [128, 64, 128],
    [255, 158, 0],
    [230, 230, 250],
    [0, 175, 0],
    [255, 99, 71],
    [0, 0, 230],
    [255, 61, 99],
    [47, 79, 79],
    [220, 20, 60],
    [255, 140, 0],
    [0, 207, 191],
    [175, 0, 75],
    [75, 0, 75],
    [112, 180, 60],
    [222, 184, 135],
    [255, 127, 80],
], dtype=np.uint8)


class SceneFileError(ValueError):
    """Raised when a voxel or Gaussian file cannot be decoded."""


def _check_magic(magic: bytes, expected: bytes) -> None:
    if magic[:7] != expected[:7]:
        raise SceneFileError(f"magic mismatch: expected {expected!r}, got {magic!r}")
    if magic != expected:
        raise SceneFileError(f"version mismatch: expected {expected!r}, got {magic!r}")


def _check_length(actual: int, expected: int) -> None:
    if actual < expected:
        raise SceneFileError(f"truncated payload: expected {expected} bytes, got {actual}")
    if actual > expected:
        raise SceneFileError(f"trailing data: expected {expected} payload bytes, got {actual}")


def write_voxel_file(grid: VoxelGrid, path) -> None:
    """Write grid labels as VG3SVOX1; the empty class is stored as 255."""
    if grid.labels is None:
        raise SceneFileError("voxel grid has no labels to write")
    if grid.num_classes > MAX_CLASSES:
        raise SceneFileError(f"{grid.num_classes} classes do not fit in a byte label")
    labels = np.asarray(grid.labels, dtype=np.int64).reshape(-1)
    if labels.size != grid.spec.num_voxels:
        raise SceneFileError(f"label count {labels.size} != grid voxels {grid.spec.num_voxels}")
    if labels.min() < 0 or labels.max() > grid.num_classes:
        raise SceneFileError(f"labels outside [0, {grid.num_classes}]")
    stored = np.where(labels == grid.empty_label, EMPTY_BYTE, labels).astype(np.uint8)
    x, y, z = grid.spec.dims
    header = _VOXEL_HEADER.pack(VOXEL_MAGIC, x, y, z, grid.num_classes,
                                *grid.spec.origin, grid.spec.voxel_size)
    with open(path, "wb") as f:
        f.write(header)
        f.write(stored.tobytes())


def read_voxel_file(path) -> VoxelGrid:
    """
    Read a VG3SVOX1 file into a labels-only VoxelGrid.

    Raises:
        FileNotFoundError: If the path does not exist
        SceneFileError: Bad magic/version, dimensions, labels or length
    """
    raw = Path(path).read_bytes()
    if len(raw) < _VOXEL_HEADER.size:
        raise SceneFileError(f"truncated header: expected {_VOXEL_HEADER.size} bytes, got {len(raw)}")
    magic, x, y, z, num_classes, ox, oy, oz, voxel_size = _VOXEL_HEADER.unpack_from(raw)
    _check_magic(magic, VOXEL_MAGIC)
    count = x * y * z
    if count == 0 or count > MAX_VOXELS:
        raise SceneFileError(f"dimension overflow: {x}x{y}x{z}")
    if not 1 <= num_classes <= MAX_CLASSES:
        raise SceneFileError(f"class count {num_classes} outside [1, {MAX_CLASSES}]")
    if not voxel_size > 0:
        raise SceneFileError(f"voxel size must be positive, got {voxel_size}")
    _check_length(len(raw) - _VOXEL_HEADER.size, count)

    stored = np.frombuffer(raw, dtype=np.uint8, count=count, offset=_VOXEL_HEADER.size)
    bad = (stored >= num_classes) & (stored != EMPTY_BYTE)
    if np.any(bad):
        raise SceneFileError(f"label {int(stored[bad][0])} outside [0, {num_classes}) and not 255")
    labels = np.where(stored == EMPTY_BYTE, num_classes, stored).astype(np.int64)
    spec = GridSpec((x, y, z), (float(ox), float(oy), float(oz)), float(voxel_size))
    return VoxelGrid(spec, num_classes, labels=labels.reshape(x, y, z))


def write_gaussian_file(gaussians: GaussianSet, path) -> None:
    """Write J records of f32 m[3], s[3], r[4], opacity, logits[C]."""
    records = np.concatenate([
        gaussians.means,
        gaussians.scales,
        gaussians.rotations,
        gaussians.opacities[:, None],
        gaussians.logits,
    ], axis=1).astype("<f4")
    header = _GAUSSIAN_HEADER.pack(GAUSSIAN_MAGIC, gaussians.count, gaussians.num_classes)
    with open(path, "wb") as f:
        f.write(header)
        f.write(records.tobytes())


def read_gaussian_file(path) -> GaussianSet:
    """
    Read a VG3SGAU1 file. Opacities are stored directly and converted back
    to logits (clamped away from 0 and 1).

    Raises:
        FileNotFoundError: If the path does not exist
        SceneFileError: Bad magic/version, counts, values or length
    """
    raw = Path(path).read_bytes()
    if len(raw) < _GAUSSIAN_HEADER.size:
        raise SceneFileError(
            f"truncated header: expected {_GAUSSIAN_HEADER.size} bytes, got {len(raw)}")
    magic, count, num_classes = _GAUSSIAN_HEADER.unpack_from(raw)
    _check_magic(magic, GAUSSIAN_MAGIC)
    if count == 0 or not 1 <= num_classes <= MAX_CLASSES:
        raise SceneFileError(f"bad Gaussian header: J={count}, classes={num_classes}")
    width = 11 + num_classes
    if count * width > MAX_VOXELS:
        raise SceneFileError(f"dimension overflow: {count} records of {width} values")
    _check_length(len(raw) - _GAUSSIAN_HEADER.size, count * width * 4)

    records = np.frombuffer(raw, dtype="<f4", count=count * width,
                            offset=_GAUSSIAN_HEADER.size).reshape(count, width).astype(np.float64)
    if not np.all(np.isfinite(records)):
        raise SceneFileError("Gaussian records contain non-finite values")
    scales, opacities = records[:, 3:6], records[:, 10]
    if np.any(scales <= 0):
        raise SceneFileError("Gaussian scales must be positive")
    if np.any((opacities < 0) | (opacities > 1)):
        raise SceneFileError("Gaussian opacities must lie in [0, 1]")
    norms = np.linalg.norm(records[:, 6:10], axis=1)
    if np.any(norms == 0):
        raise SceneFileError("Gaussian rotations must be non-zero quaternions")
    return GaussianSet.from_opacities(records[:, 0:3], scales, records[:, 6:10] / norms[:, None],
                                      opacities, records[:, 11:])


def export_ply(grid: VoxelGrid, path) -> int:
    """
    Write occupied voxel centres as an ASCII PLY point cloud.

    Returns:
        Number of vertices written
    """
    labels = np.asarray(grid.labels).reshape(-1)
    occupied = labels != grid.empty_label
    points = grid.spec.voxel_centers()[occupied]
    colors = CLASS_PALETTE[labels[occupied] % len(CLASS_PALETTE)]
    vertices = np.empty(len(points), dtype=PLY_VERTEX_DTYPE)
    for axis, name in enumerate("xyz"):
        vertices[name] = points[:, axis]
    for channel, name in enumerate(("red", "green", "blue")):
        vertices[name] = colors[:, channel]
    PlyData([PlyElement.describe(vertices, "vertex")], text=True).write(str(path))
    return int(len(points))
