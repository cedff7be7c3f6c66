"""
Synthetic Desk-Scale Scenes

A ground slab plus axis-aligned boxes inside the grid volume, rasterized
into ground-truth voxel labels.
"""

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from src.gaussian_scene import GridSpec, VoxelGrid

DEFAULT_CLASS_NAMES = ("ground", "vehicle", "building", "vegetation")


@dataclass(frozen=True)
class SceneBox:
    """Solid box of one class: centre and full extents in metres."""
    label: int
    center: Tuple[float, float, float]
    extents: Tuple[float, float, float]


@dataclass
class SyntheticScene:
    """
    Ground plane (voxels with centre below ground_height get ground_label)
    and boxes; later boxes are painted over earlier ones, boxes over ground.
    ground_height None means no ground.
    """
    grid: GridSpec
    num_classes: int
    ground_height: Optional[float] = None
    ground_label: int = 0
    boxes: List[SceneBox] = field(default_factory=list)

    def __post_init__(self):
        labels = [box.label for box in self.boxes]
        if self.ground_height is not None:
            labels.append(self.ground_label)
        for label in labels:
            if not 0 <= label < self.num_classes:
                raise ValueError(f"class {label} outside [0, {self.num_classes})")
        lower, upper = self.grid.lower, self.grid.upper
        for box in self.boxes:
            lo = np.asarray(box.center) - 0.5 * np.asarray(box.extents)
            hi = np.asarray(box.center) + 0.5 * np.asarray(box.extents)
            if np.any(lo < lower - 1e-9) or np.any(hi > upper + 1e-9):
                raise ValueError(f"box {box} leaves the grid volume")

    def rasterize(self) -> VoxelGrid:
        return rasterize_scene(self, self.grid)


def rasterize_scene(scene: SyntheticScene, spec: GridSpec) -> VoxelGrid:
    """Ground-truth labels: boxes over ground over empty, by voxel-centre containment."""
    centers = spec.voxel_centers()
    labels = np.full(spec.num_voxels, scene.num_classes, dtype=np.int64)
    if scene.ground_height is not None:
        labels[centers[:, 2] < scene.ground_height] = scene.ground_label
    for box in scene.boxes:
        half = 0.5 * np.asarray(box.extents)
        inside = np.all(np.abs(centers - np.asarray(box.center)) < half, axis=1)
        labels[inside] = box.label
    return VoxelGrid(spec, scene.num_classes, labels=labels.reshape(spec.dims))


def default_scene(spec: GridSpec = GridSpec()) -> SyntheticScene:
    """
    Bundled toy scene for the 32 x 32 x 8 desk volume: a two-voxel ground
    slab and one box each of classes 1..3, placed relative to the volume.
    """
    vs = spec.voxel_size
    lower = spec.lower
    dims = np.asarray(spec.dims, dtype=np.float64)

    def box(label, frac_center, size_voxels):
        size = np.minimum(np.asarray(size_voxels, dtype=np.float64), dims) * vs
        center = lower + np.asarray(frac_center) * dims * vs
        floor_z = lower[2] + 2 * vs
        center[2] = floor_z + 0.5 * size[2]
        center = np.clip(center, lower + 0.5 * size, spec.upper - 0.5 * size)
        return SceneBox(label, tuple(center), tuple(size))

    return SyntheticScene(
        grid=spec,
        num_classes=len(DEFAULT_CLASS_NAMES),
        ground_height=float(lower[2] + 2 * vs),
        ground_label=0,
        boxes=[
            box(1, (0.75, 0.5, 0.0), (6, 4, 2)),
            box(2, (0.25, 0.75, 0.0), (6, 6, 5)),
            box(3, (0.3, 0.25, 0.0), (4, 4, 3)),
        ],
    )
