"""
Test synthetic token generation, cameras and the token file format
"""

import struct

import numpy as np
import pytest

from src.gaussian_scene import GridSpec
from src.synthetic_scene import SyntheticScene, default_scene
from src.token_provider import (TOKEN_MAGIC, CameraRig, TokenConfig, TokenFileError, TokenStack,
                                encode_patches, generate_synthetic_tokens, project_points,
                                read_token_file, write_token_file)


@pytest.fixture
def rig():
    return CameraRig.surround(2, center=(0.0, 0.0), height=1.5, image_size=(128, 128))


@pytest.fixture
def stack():
    rng = np.random.default_rng(0)
    return TokenStack(rng.standard_normal((2, 4, 6, 3)), (2, 3))


def test_token_file_keeps_values_and_precision(tmp_path, stack):
    path = tmp_path / "tokens.vgt"
    write_token_file(stack, path)
    loaded = read_token_file(path)
    assert loaded.data.dtype == np.float64
    assert loaded.patch_grid == (2, 3)
    np.testing.assert_array_equal(loaded.data, stack.data)

    single = TokenStack(stack.data.astype(np.float32), (2, 3))
    write_token_file(single, path)
    assert read_token_file(path).data.dtype == np.float32


def test_token_file_header_layout(tmp_path, stack):
    path = tmp_path / "tokens.vgt"
    write_token_file(stack, path)
    raw = path.read_bytes()
    assert raw[:8] == TOKEN_MAGIC
    assert struct.unpack_from("<7I", raw, 8) == (2, 4, 6, 3, 2, 3, 2)
    assert len(raw) == 8 + 7 * 4 + stack.data.size * 8


def _corrupt(path, offset, payload):
    raw = bytearray(path.read_bytes())
    raw[offset:offset + len(payload)] = payload
    path.write_bytes(bytes(raw))


@pytest.mark.parametrize("offset,payload,message", [
    (0, b"NOTATOKN", "magic mismatch"),
    (0, b"VG3STOK2", "version mismatch"),
    (8 + 6 * 4, struct.pack("<I", 9), "unknown dtype tag"),
    (8 + 2 * 4, struct.pack("<I", 5), "patch grid"),
])
def test_token_file_rejects_bad_headers(tmp_path, stack, offset, payload, message):
    path = tmp_path / "tokens.vgt"
    write_token_file(stack, path)
    _corrupt(path, offset, payload)
    with pytest.raises(TokenFileError, match=message):
        read_token_file(path)


def test_token_file_rejects_truncation_and_trailing_bytes(tmp_path, stack):
    path = tmp_path / "tokens.vgt"
    write_token_file(stack, path)
    raw = path.read_bytes()

    path.write_bytes(raw[:-8])
    with pytest.raises(TokenFileError, match="truncated payload"):
        read_token_file(path)

    path.write_bytes(raw + b"\x00")
    with pytest.raises(TokenFileError, match="trailing data"):
        read_token_file(path)

    path.write_bytes(raw[:10])
    with pytest.raises(TokenFileError, match="truncated header"):
        read_token_file(path)


def test_token_stack_rejects_non_finite_values():
    data = np.zeros((1, 1, 4, 2))
    data[0, 0, 1, 1] = np.inf
    with pytest.raises(ValueError):
        TokenStack(data, (2, 2))


def test_missing_token_file_raises_file_not_found(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_token_file(tmp_path / "absent.vgt")


def test_surround_rig_has_proper_rotations(rig):
    for rotation in rig.rotations:
        np.testing.assert_allclose(rotation @ rotation.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(rotation) == pytest.approx(1.0)


def test_rig_rejects_reflections():
    reflection = np.diag([1.0, 1.0, -1.0])[None]
    with pytest.raises(ValueError):
        CameraRig(np.array([[50.0, 50.0, 32.0, 32.0]]), reflection, np.zeros((1, 3)), (64, 64))


def test_point_ahead_projects_to_principal_point(rig):
    ahead = np.array([[5.0, 0.0, 1.5]])
    pixels, depth, visible = project_points(rig, 0, ahead)
    np.testing.assert_allclose(pixels[0], [64.0, 64.0], atol=1e-9)
    assert depth[0] == pytest.approx(5.0)
    assert visible[0]


def test_point_behind_camera_is_not_visible(rig):
    behind = np.array([[-5.0, 0.0, 1.5]])
    _, depth, visible = project_points(rig, 0, behind)
    assert depth[0] < 0
    assert not visible[0]


def test_encode_patches_shapes_and_ranges(rig):
    cfg = TokenConfig()
    scene = default_scene(GridSpec())
    depth, label = encode_patches(scene, rig, cfg)
    assert depth.shape == (2, 64) and label.shape == (2, 64)
    assert np.all((depth > 0) & (depth <= cfg.far))
    assert np.all((label >= 0) & (label <= scene.num_classes))
    assert np.any(label < scene.num_classes)


def test_synthetic_tokens_are_deterministic_per_seed(rig):
    cfg = TokenConfig()
    scene = default_scene(GridSpec())
    a = generate_synthetic_tokens(scene, rig, cfg, seed=3)
    b = generate_synthetic_tokens(scene, rig, cfg, seed=3)
    c = generate_synthetic_tokens(scene, rig, cfg, seed=4)
    assert a.data.shape == (2, 8, 64, 32)
    np.testing.assert_array_equal(a.data, b.data)
    assert not np.array_equal(a.data, c.data)


def test_zero_layer_mix_gives_identical_layers(rig):
    cfg = TokenConfig(layer_mix=0.0, noise_std=0.0)
    tokens = generate_synthetic_tokens(default_scene(GridSpec()), rig, cfg, seed=0)
    for layer in range(1, cfg.layers):
        np.testing.assert_allclose(tokens.data[:, layer], tokens.data[:, 0], rtol=1e-12, atol=1e-14)


def test_rig_view_count_must_match_config(rig):
    with pytest.raises(ValueError):
        encode_patches(default_scene(GridSpec()), rig, TokenConfig(views=3))


def test_empty_scene_encodes_far_plane_and_empty_label(rig):
    cfg = TokenConfig()
    empty = SyntheticScene(GridSpec(), 4)
    depth, label = encode_patches(empty, rig, cfg)
    np.testing.assert_array_equal(depth, cfg.far)
    np.testing.assert_array_equal(label, 4)
