"""
Test Gaussian primitives, splatting and the view-guided decoder
"""

import numpy as np
import pytest

from src import tensor_core as tc
from src.gaussian_scene import (GaussianSet, GridSpec, VoxelGrid, covariance_from,
                                culling_error_bound, decode_gaussians, init_decoder_params,
                                labels_from, lattice_init, sample_views, semantic_distribution,
                                splat, splat_backward, splat_forward, splat_oracle, splat_tensors)
from src.hgfa import hgfa_forward, init_hgfa_params
from src.main import prepare_data
from src.selftest import _random_gaussians, randomize_params, tiny_config, tiny_scene

SMALL_GRID = GridSpec((6, 6, 4), (-3.0, -3.0, -2.0), 1.0)


def _single(mean, opacity, scales=(0.5, 0.5, 0.5), logits=(2.0, 0.0)):
    return GaussianSet.from_opacities(np.array([mean], dtype=float), np.array([scales]),
                                      np.array([[1.0, 0.0, 0.0, 0.0]]), [opacity],
                                      np.array([logits]))


def test_covariance_of_axis_aligned_gaussian():
    cov = covariance_from(np.array([1.0, 2.0, 3.0]), np.array([1.0, 0.0, 0.0, 0.0]))
    np.testing.assert_allclose(cov, np.diag([1.0, 4.0, 9.0]), atol=1e-12)


def test_covariance_follows_rotation_and_normalizes_quaternion():
    half = np.sqrt(0.5)
    quarter_turn_z = np.array([half, 0.0, 0.0, half]) * 3.0
    cov = covariance_from(np.array([1.0, 2.0, 3.0]), quarter_turn_z)
    np.testing.assert_allclose(cov, np.diag([4.0, 1.0, 9.0]), atol=1e-12)
    assert np.all(np.linalg.eigvalsh(cov) > 0)


def test_zero_quaternion_is_rejected():
    with pytest.raises(ValueError):
        covariance_from(np.ones(3), np.zeros(4))


def test_gaussian_set_rejects_inconsistent_shapes():
    with pytest.raises(ValueError):
        GaussianSet(np.zeros((2, 3)), np.ones((2, 3)), np.ones((3, 4)), np.zeros(2), np.zeros((2, 4)))


def test_lattice_init_properties():
    spec = GridSpec()
    init = lattice_init(spec, 100, 4, seed=0)
    assert init.count == 100 and init.num_classes == 4
    assert np.all(init.means >= spec.lower) and np.all(init.means <= spec.upper)
    np.testing.assert_array_equal(init.scales, 1.5)
    np.testing.assert_array_equal(init.rotations[:, 0], 1.0)
    np.testing.assert_allclose(init.opacities, 0.1)
    np.testing.assert_array_equal(init.logits, 0.0)
    assert len({tuple(m) for m in init.means}) == 100


def test_lattice_init_is_seeded():
    a = lattice_init(GridSpec(), 50, 4, seed=1)
    b = lattice_init(GridSpec(), 50, 4, seed=1)
    c = lattice_init(GridSpec(), 50, 4, seed=2)
    np.testing.assert_array_equal(a.means, b.means)
    assert not np.array_equal(a.means, c.means)


def test_single_gaussian_at_voxel_centre_gives_its_opacity():
    gaussians = _single((0.5, 0.5, 0.5), 0.7)
    grid = splat(gaussians, SMALL_GRID, cull_kappa=3.0)
    assert grid.occupancy[3, 3, 2] == pytest.approx(0.7)
    assert grid.occupancy[3, 3, 2] == grid.occupancy.max()
    probs = np.exp([2.0, 0.0]) / np.exp([2.0, 0.0]).sum()
    np.testing.assert_allclose(grid.semantics[3, 3, 2], probs)


def test_empty_gaussian_set_gives_empty_uniform_grid():
    empty = GaussianSet(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros((0, 4)), np.zeros(0),
                        np.zeros((0, 3)))
    grid = splat(empty, SMALL_GRID)
    np.testing.assert_array_equal(grid.occupancy, 0.0)
    np.testing.assert_allclose(grid.semantics, 1.0 / 3.0)
    assert np.all(labels_from(grid).labels == 3)


def test_two_overlapping_gaussians_combine_probabilistically():
    a = _single((0.5, 0.5, 0.5), 0.5, logits=(5.0, -5.0))
    b = _single((0.5, 0.5, 0.5), 0.5, logits=(-5.0, 5.0))
    both = GaussianSet(*(np.concatenate([getattr(a, n), getattr(b, n)])
                         for n in ("means", "scales", "rotations", "opacity_logits", "logits")))
    grid = splat(both, SMALL_GRID)
    assert grid.occupancy[3, 3, 2] == pytest.approx(0.75)
    np.testing.assert_allclose(grid.semantics[3, 3, 2], [0.5, 0.5], atol=1e-12)


@pytest.mark.parametrize("seed", range(3))
def test_uncapped_splat_matches_oracle(seed):
    g = _random_gaussians(np.random.default_rng(seed), 20, SMALL_GRID, 3)
    oracle = splat_oracle(g, SMALL_GRID)
    exact = splat(g, SMALL_GRID, cull_kappa=float("inf"))
    np.testing.assert_allclose(exact.occupancy, oracle.occupancy, atol=1e-12, rtol=0)
    np.testing.assert_allclose(exact.semantics, oracle.semantics, atol=1e-12, rtol=0)


@pytest.mark.parametrize("seed", range(3))
def test_culling_error_stays_within_tail_bound(seed):
    g = _random_gaussians(np.random.default_rng(seed), 20, SMALL_GRID, 3)
    oracle = splat_oracle(g, SMALL_GRID)
    culled = splat(g, SMALL_GRID, cull_kappa=3.0)
    bound = culling_error_bound(g.opacities, 3.0)
    assert np.all(oracle.occupancy - culled.occupancy <= bound + 1e-12)
    assert np.all(culled.occupancy <= oracle.occupancy + 1e-12)


def test_oracle_refuses_large_problems():
    g = _random_gaussians(np.random.default_rng(0), 2, SMALL_GRID, 2)
    with pytest.raises(ValueError):
        splat_oracle(g, GridSpec((64, 64, 16)))


def test_non_positive_kappa_is_rejected():
    g = _random_gaussians(np.random.default_rng(0), 2, SMALL_GRID, 2)
    with pytest.raises(ValueError):
        splat(g, SMALL_GRID, cull_kappa=0.0)


def test_splat_is_identical_across_worker_counts():
    g = _random_gaussians(np.random.default_rng(7), 30, SMALL_GRID, 3)
    grids = [splat(g, SMALL_GRID, cull_kappa=3.0, workers=n) for n in (1, 2, 5)]
    for other in grids[1:]:
        np.testing.assert_array_equal(grids[0].occupancy, other.occupancy)
        np.testing.assert_array_equal(grids[0].semantics, other.semantics)


def test_labels_from_threshold_and_ties():
    spec = GridSpec((3, 1, 1), (0.0, 0.0, 0.0), 1.0)
    occupancy = np.array([0.9, 0.5, 0.2]).reshape(3, 1, 1)
    semantics = np.array([[0.5, 0.5], [0.1, 0.9], [0.0, 1.0]]).reshape(3, 1, 1, 2)
    labels = labels_from(VoxelGrid(spec, 2, occupancy=occupancy, semantics=semantics), 0.5).labels
    np.testing.assert_array_equal(labels.reshape(-1), [0, 2, 2])

    with pytest.raises(ValueError):
        labels_from(VoxelGrid(spec, 2, occupancy=occupancy, semantics=semantics), 1.0)


@pytest.mark.parametrize("seed", range(3))
def test_splat_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    g = _random_gaussians(rng, 4, SMALL_GRID, 3)
    tensors = [tc.Tensor(x, requires_grad=True) for x in
               (g.means, g.scales, g.rotations, g.opacities, g.logits)]
    weights = rng.standard_normal((SMALL_GRID.num_voxels, 4))

    def fn():
        field = splat_tensors(*tensors, SMALL_GRID, cull_kappa=float("inf"))
        return tc.sum(tc.mul(field, weights))

    assert tc.check_gradients(fn, tensors) < 1e-4


def test_semantic_distribution_rows_sum_to_one():
    g = _random_gaussians(np.random.default_rng(3), 10, SMALL_GRID, 3)
    field = splat_tensors(*(tc.Tensor(x) for x in (g.means, g.scales, g.rotations,
                                                    g.opacities, g.logits)), SMALL_GRID)
    dist = semantic_distribution(field).data
    assert dist.shape == (SMALL_GRID.num_voxels, 4)
    np.testing.assert_allclose(dist.sum(axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(dist[:, -1], 1.0 - field.data[:, 0])


@pytest.fixture
def tiny_inputs():
    cfg = tiny_config()
    data = prepare_data(cfg, tiny_scene(cfg))
    pyramids = hgfa_forward(data.tokens, cfg.hgfa, init_hgfa_params(cfg.hgfa, 4, 0))
    init = lattice_init(cfg.grid, cfg.scene.num_gaussians, cfg.scene.num_classes, 0)
    return cfg, data, pyramids, init


def test_untrained_decoder_returns_its_input(tiny_inputs):
    cfg, data, pyramids, init = tiny_inputs
    params = init_decoder_params(cfg.decoder, cfg.hgfa.target_dim, cfg.scene.num_classes, 0)
    decoded = decode_gaussians(pyramids, data.rig, init, cfg.decoder, params, cfg.grid).to_set()
    for name in ("means", "scales", "rotations", "opacity_logits", "logits"):
        assert getattr(decoded, name).tobytes() == getattr(init, name).tobytes()


def test_decoder_keeps_primitives_valid_under_large_updates(tiny_inputs):
    cfg, data, pyramids, init = tiny_inputs
    params = init_decoder_params(cfg.decoder, cfg.hgfa.target_dim, cfg.scene.num_classes, 0)
    randomize_params(params, 0, scale=5.0)
    decoded = decode_gaussians(pyramids, data.rig, init, cfg.decoder, params, cfg.grid).to_set()
    assert np.all(decoded.means >= cfg.grid.lower) and np.all(decoded.means <= cfg.grid.upper)
    assert np.all(decoded.scales >= cfg.decoder.scale_min_factor * cfg.grid.voxel_size - 1e-12)
    np.testing.assert_allclose(np.linalg.norm(decoded.rotations, axis=1), 1.0, atol=1e-12)
    assert np.all(np.isfinite(decoded.logits))


def test_decoder_rejects_pyramid_count_mismatch(tiny_inputs):
    cfg, data, pyramids, init = tiny_inputs
    params = init_decoder_params(cfg.decoder, cfg.hgfa.target_dim, cfg.scene.num_classes, 0)
    with pytest.raises(ValueError):
        decode_gaussians(pyramids[:1], data.rig, init, cfg.decoder, params, cfg.grid)


FIELDS = ("means", "scales", "rotations", "opacity_logits", "logits")


def _subset(g, index):
    return GaussianSet(*(getattr(g, name)[index] for name in FIELDS))


@pytest.mark.parametrize("seed", range(5))
def test_covariance_eigenvalues_are_squared_scales(seed):
    rng = np.random.default_rng(seed)
    scales = rng.uniform(0.1, 3.0, size=3)
    cov = covariance_from(scales, rng.standard_normal(4))
    np.testing.assert_allclose(cov, cov.T, atol=1e-12)
    np.testing.assert_allclose(np.linalg.eigvalsh(cov), np.sort(scales ** 2), rtol=1e-10)


@pytest.mark.parametrize("seed", range(3))
def test_splat_ignores_primitive_order(seed):
    rng = np.random.default_rng(seed)
    g = _random_gaussians(rng, 25, SMALL_GRID, 3)
    shuffled = _subset(g, rng.permutation(g.count))
    a = splat(g, SMALL_GRID, cull_kappa=3.0)
    b = splat(shuffled, SMALL_GRID, cull_kappa=3.0)
    np.testing.assert_allclose(b.occupancy, a.occupancy, rtol=0, atol=1e-12)
    np.testing.assert_allclose(b.semantics, a.semantics, rtol=0, atol=1e-12)
    np.testing.assert_array_equal(labels_from(b).labels, labels_from(a).labels)


@pytest.mark.parametrize("seed", range(3))
def test_adding_a_primitive_never_lowers_occupancy(seed):
    rng = np.random.default_rng(seed)
    g = _random_gaussians(rng, 12, SMALL_GRID, 3)
    for kappa in (3.0, float("inf")):
        fewer = splat(_subset(g, np.arange(11)), SMALL_GRID, cull_kappa=kappa)
        more = splat(g, SMALL_GRID, cull_kappa=kappa)
        assert np.all(more.occupancy >= fewer.occupancy)
        front = splat(_subset(g, np.r_[11, np.arange(11)]), SMALL_GRID, cull_kappa=kappa)
        assert np.all(front.occupancy >= fewer.occupancy - 1e-12)


def _saturated_pair(opacities):
    means = np.array([[0.5, 0.5, 0.5], [0.5, 0.5, 0.5]])
    scales = np.full((2, 3), 0.4)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (2, 1))
    return splat_forward(means, scales, quats, np.asarray(opacities, dtype=float),
                         np.zeros((2, 2)), SMALL_GRID, cull_kappa=3.0)


def test_occupancy_gradient_with_a_fully_opaque_primitive():
    centre = (3 * 6 + 3) * 4 + 2
    ctx = _saturated_pair([1.0, 0.4])
    assert ctx.occupancy[centre] == 1.0
    grad_occupancy = np.zeros(SMALL_GRID.num_voxels)
    grad_occupancy[centre] = 1.0
    grads = splat_backward(ctx, grad_occupancy, np.zeros((SMALL_GRID.num_voxels, 2)))
    # d o / d a_0 = 1 - alpha_1 at the centre, d o / d a_1 = 1 - alpha_0 = 0
    np.testing.assert_allclose(grads["opacities"], [0.6, 0.0], atol=1e-12)
    assert np.all(np.isfinite(grads["means"])) and np.all(np.isfinite(grads["scales"]))


def test_two_fully_opaque_primitives_block_each_other():
    centre = (3 * 6 + 3) * 4 + 2
    ctx = _saturated_pair([1.0, 1.0])
    grad_occupancy = np.zeros(SMALL_GRID.num_voxels)
    grad_occupancy[centre] = 1.0
    grads = splat_backward(ctx, grad_occupancy, np.zeros((SMALL_GRID.num_voxels, 2)))
    np.testing.assert_array_equal(grads["opacities"], [0.0, 0.0])


def test_opaque_primitive_gradient_matches_unsaturated_limit():
    centre = (3 * 6 + 3) * 4 + 2
    grad_occupancy = np.zeros(SMALL_GRID.num_voxels)
    grad_occupancy[centre] = 1.0
    no_semantics = np.zeros((SMALL_GRID.num_voxels, 2))
    exact = splat_backward(_saturated_pair([1.0, 0.4]), grad_occupancy, no_semantics)
    near = splat_backward(_saturated_pair([1.0 - 1e-9, 0.4]), grad_occupancy, no_semantics)
    np.testing.assert_allclose(exact["opacities"][0], near["opacities"][0], atol=1e-6)


def test_primitive_behind_every_camera_gets_zero_feature(tiny_inputs):
    cfg, data, pyramids, _ = tiny_inputs
    rig = data.rig
    position = -rig.rotations[0].T @ rig.translations[0]
    above = position + np.array([0.0, 0.0, 3.0])
    ahead = position + 2.0 * rig.rotations[0][2]
    for view in range(rig.views):
        depth = (rig.rotations[view] @ above + rig.translations[view])[2]
        assert depth <= cfg.tokens.near

    features = sample_views(tc.Tensor(np.stack([above, ahead])), pyramids, rig,
                            cfg.tokens.near).data
    np.testing.assert_array_equal(features[0], 0.0)
    assert np.any(features[1] != 0.0)
