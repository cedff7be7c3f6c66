"""
Test the voxel and Gaussian file formats and PLY export
"""

import struct

import numpy as np
import pytest
from plyfile import PlyData

from src.gaussian_scene import GaussianSet, GridSpec, VoxelGrid
from src.scene_io import (EMPTY_BYTE, GAUSSIAN_MAGIC, VOXEL_MAGIC, SceneFileError, export_ply,
                          read_gaussian_file, read_voxel_file, write_gaussian_file,
                          write_voxel_file)

GRID = GridSpec((3, 2, 2), (-1.5, -1.0, 0.0), 1.0)
HEADER = 8 + 4 * 4 + 4 * 4


@pytest.fixture
def grid():
    labels = np.array([0, 1, 2, 2, 1, 0, 2, 2, 2, 1, 0, 2]).reshape(3, 2, 2)
    return VoxelGrid(GRID, 2, labels=labels)


@pytest.fixture
def gaussians():
    rng = np.random.default_rng(0)
    quats = rng.standard_normal((3, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianSet.from_opacities(rng.uniform(-1, 1, (3, 3)), rng.uniform(0.2, 1.0, (3, 3)),
                                      quats, [0.1, 0.5, 0.9], rng.standard_normal((3, 2)))


def test_voxel_file_layout_and_empty_byte(tmp_path, grid):
    path = tmp_path / "grid.vox"
    write_voxel_file(grid, path)
    raw = path.read_bytes()
    assert raw[:8] == VOXEL_MAGIC
    assert struct.unpack_from("<4I3ff", raw, 8) == (3, 2, 2, 2, -1.5, -1.0, 0.0, 1.0)
    payload = np.frombuffer(raw, dtype=np.uint8, offset=HEADER)
    assert len(payload) == 12
    assert np.all(payload[grid.labels.reshape(-1) == 2] == EMPTY_BYTE)
    assert payload[1] == 1


def test_voxel_file_restores_labels_and_geometry(tmp_path, grid):
    path = tmp_path / "grid.vox"
    write_voxel_file(grid, path)
    loaded = read_voxel_file(path)
    assert loaded.spec == GRID
    assert loaded.num_classes == 2
    np.testing.assert_array_equal(loaded.labels, grid.labels)


def _rewrite(path, offset, payload):
    raw = bytearray(path.read_bytes())
    raw[offset:offset + len(payload)] = payload
    path.write_bytes(bytes(raw))


@pytest.mark.parametrize("offset,payload,message", [
    (0, b"NOTAVOXL", "magic mismatch"),
    (0, b"VG3SVOX2", "version mismatch"),
    (8, struct.pack("<I", 0), "dimension overflow"),
    (20, struct.pack("<I", 0), "class count"),
    (HEADER - 4, struct.pack("<f", -1.0), "voxel size"),
    (HEADER, bytes([7]), "label 7"),
])
def test_voxel_file_rejects_corruption(tmp_path, grid, offset, payload, message):
    path = tmp_path / "grid.vox"
    write_voxel_file(grid, path)
    _rewrite(path, offset, payload)
    with pytest.raises(SceneFileError, match=message):
        read_voxel_file(path)


def test_voxel_file_rejects_bad_lengths(tmp_path, grid):
    path = tmp_path / "grid.vox"
    write_voxel_file(grid, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])
    with pytest.raises(SceneFileError, match="truncated payload"):
        read_voxel_file(path)
    path.write_bytes(raw + b"\x00")
    with pytest.raises(SceneFileError, match="trailing data"):
        read_voxel_file(path)
    path.write_bytes(raw[:12])
    with pytest.raises(SceneFileError, match="truncated header"):
        read_voxel_file(path)


def test_voxel_writer_needs_labels():
    with pytest.raises(SceneFileError):
        write_voxel_file(VoxelGrid(GRID, 2, occupancy=np.zeros(GRID.dims)), "unused.vox")


def test_gaussian_file_keeps_values_at_single_precision(tmp_path, gaussians):
    path = tmp_path / "scene.vgs"
    write_gaussian_file(gaussians, path)
    raw = path.read_bytes()
    assert raw[:8] == GAUSSIAN_MAGIC
    assert struct.unpack_from("<II", raw, 8) == (3, 2)
    assert len(raw) == 16 + 3 * (11 + 2) * 4

    loaded = read_gaussian_file(path)
    np.testing.assert_allclose(loaded.means, gaussians.means, rtol=1e-6, atol=1e-7)
    np.testing.assert_allclose(loaded.scales, gaussians.scales, rtol=1e-6)
    np.testing.assert_allclose(loaded.opacities, [0.1, 0.5, 0.9], rtol=1e-6)
    np.testing.assert_allclose(np.linalg.norm(loaded.rotations, axis=1), 1.0, atol=1e-12)


@pytest.mark.parametrize("column,value,message", [
    (3, -1.0, "scales"),
    (10, 1.5, "opacities"),
    (0, np.nan, "non-finite"),
])
def test_gaussian_file_rejects_invalid_records(tmp_path, gaussians, column, value, message):
    path = tmp_path / "scene.vgs"
    write_gaussian_file(gaussians, path)
    _rewrite(path, 16 + column * 4, struct.pack("<f", value))
    with pytest.raises(SceneFileError, match=message):
        read_gaussian_file(path)


def test_gaussian_file_rejects_zero_quaternion(tmp_path, gaussians):
    path = tmp_path / "scene.vgs"
    write_gaussian_file(gaussians, path)
    _rewrite(path, 16 + 6 * 4, struct.pack("<4f", 0.0, 0.0, 0.0, 0.0))
    with pytest.raises(SceneFileError, match="quaternion"):
        read_gaussian_file(path)


def test_gaussian_file_rejects_bad_header_and_length(tmp_path, gaussians):
    path = tmp_path / "scene.vgs"
    write_gaussian_file(gaussians, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(SceneFileError, match="truncated payload"):
        read_gaussian_file(path)
    path.write_bytes(b"VG3SGAU9" + raw[8:])
    with pytest.raises(SceneFileError, match="version mismatch"):
        read_gaussian_file(path)


def test_missing_scene_file_raises_file_not_found(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_voxel_file(tmp_path / "absent.vox")


def test_ply_export_lists_occupied_voxels(tmp_path, grid):
    path = tmp_path / "grid.ply"
    count = export_ply(grid, path)
    assert count == int(np.sum(grid.labels != 2))
    assert path.read_text().splitlines()[:2] == ["ply", "format ascii 1.0"]
    ply = PlyData.read(str(path))
    vertices = ply["vertex"]
    assert vertices.count == count
    first = vertices.data[0]
    assert (first["x"], first["y"], first["z"]) == (-1.0, -0.5, 0.5)
    assert (first["red"], first["green"], first["blue"]) == (128, 64, 128)


def test_ply_export_of_empty_grid_has_no_vertices(tmp_path):
    empty = VoxelGrid(GRID, 2, labels=np.full(GRID.dims, 2))
    path = tmp_path / "empty.ply"
    assert export_ply(empty, path) == 0
    assert PlyData.read(str(path))["vertex"].count == 0
