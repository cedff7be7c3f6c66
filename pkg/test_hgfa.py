"""
Test the hierarchical token adapter: grouping, fusion, refinement, pyramid
"""

import numpy as np
import pytest

from src import tensor_core as tc
from src.hgfa import (HgfaConfig, dpt_pyramid, fusion_weights, gatf_fuse, hgfa_forward,
                      init_hgfa_params, lsfp_spatial_block, partition_groups, sinusoidal_embedding,
                      tatr_refine)
from src.selftest import randomize_params
from src.token_provider import TokenStack


@pytest.fixture
def cfg():
    return HgfaConfig()


@pytest.fixture
def stack(cfg):
    rng = np.random.default_rng(0)
    return TokenStack(rng.standard_normal((2, cfg.num_layers, 64, 32)), (8, 8))


def test_partition_keeps_consecutive_layers_in_order(cfg, stack):
    groups = partition_groups(stack, cfg)
    assert len(groups) == 2 and len(groups[0]) == cfg.groups
    for view in range(2):
        for k in range(cfg.groups):
            expected = stack.data[view, 2 * k:2 * k + 2]
            np.testing.assert_array_equal(groups[view][k].data, expected)


def test_partition_rejects_layer_count_mismatch(cfg):
    bad = TokenStack(np.zeros((1, 10, 4, 3)), (2, 2))
    with pytest.raises(ValueError, match="cannot form"):
        partition_groups(bad, cfg)


def test_config_rejects_non_power_of_two_scale():
    with pytest.raises(ValueError):
        HgfaConfig(scale_factors=(4.0, 3.0, 1.0, 0.5))
    with pytest.raises(ValueError):
        HgfaConfig(groups=3)


@pytest.mark.parametrize("seed", range(20))
def test_fusion_weights_sum_to_one_per_token(seed):
    cfg = HgfaConfig(groups=1, layers_per_group=5, expansion_ratios=(2.0,), pyramid_dims=(4,),
                     scale_factors=(1.0,), target_dim=4)
    params = init_hgfa_params(cfg, 6, seed)
    randomize_params(params, seed, scale=2.0)
    group = tc.Tensor(np.random.default_rng(seed).standard_normal((5, 9, 6)) * 4.0)
    weights = fusion_weights(group, params, "hgfa.g0")
    assert weights.shape == (5, 9)
    assert np.all(weights.data >= 0)
    np.testing.assert_allclose(weights.data.sum(axis=0), 1.0, atol=1e-10)


def test_untrained_fusion_is_uniform(cfg, stack):
    params = init_hgfa_params(cfg, 32, 0)
    group = partition_groups(stack, cfg)[0][0]
    np.testing.assert_allclose(fusion_weights(group, params, "hgfa.g0").data, 0.5)


def test_gatf_off_uses_last_layer(cfg, stack):
    params = init_hgfa_params(cfg, 32, 0)
    group = partition_groups(stack, cfg)[0][1]
    fused = gatf_fuse(group, params, "hgfa.g1", use_gatf=False)
    expected = tc.layer_norm(group[1], params["hgfa.g1.gatf.ln_gain"],
                             params["hgfa.g1.gatf.ln_bias"])
    np.testing.assert_array_equal(fused.data, expected.data)


def test_zero_initialized_residuals_pass_through_bytewise(cfg):
    params = init_hgfa_params(cfg, 32, 0)
    tokens = tc.Tensor(np.random.default_rng(1).standard_normal((64, 32)))
    refined = tatr_refine(tokens, params, "hgfa.g2", dropout=0.0, training=False)
    assert refined.data.tobytes() == tokens.data.tobytes()

    spatial = lsfp_spatial_block(tokens, (8, 8), params, "hgfa.g2")
    reshaped = np.ascontiguousarray(tokens.data.T.reshape(32, 8, 8))
    assert spatial.data.tobytes() == reshaped.tobytes()


def test_pyramid_shape_law(cfg, stack):
    assert cfg.flattened_length((8, 8)) == 1360
    pyramids = hgfa_forward(stack, cfg, init_hgfa_params(cfg, 32, 0))
    assert len(pyramids) == 2
    shapes = [level.shape for level in pyramids[0].levels]
    assert shapes == [(32, 32, 32), (32, 16, 16), (32, 8, 8), (32, 4, 4)]
    assert pyramids[0].flattened.shape == (1360, 32)


def test_flattened_order_is_level_then_row_major(cfg, stack):
    pyramid = hgfa_forward(stack, cfg, init_hgfa_params(cfg, 32, 0))[0]
    level1 = pyramid.levels[1].data
    offset = 32 * 32
    np.testing.assert_array_equal(pyramid.flattened.data[offset], level1[:, 0, 0])
    np.testing.assert_array_equal(pyramid.flattened.data[offset + 1], level1[:, 0, 1])
    np.testing.assert_array_equal(pyramid.flattened.data[offset + 16], level1[:, 1, 0])


def test_naive_pyramid_ablation_keeps_level_shapes(stack):
    cfg = HgfaConfig(use_lsfp=False, use_tatr=False, use_gatf=False)
    pyramid = hgfa_forward(stack, cfg, init_hgfa_params(cfg, 32, 0))[0]
    assert [level.shape for level in pyramid.levels] == [(32, 32, 32), (32, 16, 16),
                                                         (32, 8, 8), (32, 4, 4)]
    assert pyramid.flattened.shape == (1360, 32)


def test_views_share_parameters_but_not_outputs(cfg, stack):
    pyramids = hgfa_forward(stack, cfg, init_hgfa_params(cfg, 32, 0))
    assert not np.array_equal(pyramids[0].flattened.data, pyramids[1].flattened.data)

    single = TokenStack(stack.data[1:2], (8, 8))
    alone = hgfa_forward(single, cfg, init_hgfa_params(cfg, 32, 0))[0]
    np.testing.assert_array_equal(alone.flattened.data, pyramids[1].flattened.data)


def test_training_dropout_is_reproducible(cfg, stack):
    params = init_hgfa_params(cfg, 32, 0)
    randomize_params(params, 0, scale=0.1)
    a = hgfa_forward(stack, cfg, params, training=True, seed=5, step=3)[0].flattened.data
    b = hgfa_forward(stack, cfg, params, training=True, seed=5, step=3)[0].flattened.data
    c = hgfa_forward(stack, cfg, params, training=True, seed=5, step=4)[0].flattened.data
    np.testing.assert_array_equal(a, b)
    assert not np.array_equal(a, c)


def test_sinusoidal_embedding_is_bounded_and_position_dependent():
    embedding = sinusoidal_embedding(16, 4, 6)
    assert embedding.shape == (16, 4, 6)
    assert np.all(np.abs(embedding) <= 1.0)
    assert not np.array_equal(embedding[:, 0, 0], embedding[:, 1, 0])
    assert not np.array_equal(embedding[:, 0, 0], embedding[:, 0, 1])


def _three_layer_groups():
    return HgfaConfig(groups=2, layers_per_group=3, expansion_ratios=(2.0, 1.5),
                      pyramid_dims=(8, 6), scale_factors=(2.0, 1.0), target_dim=8,
                      dropout=0.0)


def test_permuting_layers_with_their_bias_keeps_fusion():
    cfg = _three_layer_groups()
    params = init_hgfa_params(cfg, 12, 0)
    randomize_params(params, 1, scale=1.0)
    group = tc.Tensor(np.random.default_rng(2).standard_normal((3, 16, 12)))
    perm = [2, 0, 1]
    permuted = dict(params)
    permuted["hgfa.g0.gatf.layer_bias"] = tc.Tensor(params["hgfa.g0.gatf.layer_bias"].data[perm],
                                                    requires_grad=True)
    before = gatf_fuse(group, params, "hgfa.g0")
    after = gatf_fuse(tc.Tensor(group.data[perm]), permuted, "hgfa.g0")
    np.testing.assert_allclose(after.data, before.data, rtol=0, atol=1e-12)


def test_layer_permutation_stays_inside_its_group():
    cfg = _three_layer_groups()
    params = init_hgfa_params(cfg, 12, 0)
    randomize_params(params, 3, scale=0.5)
    data = np.random.default_rng(4).standard_normal((1, 6, 16, 12))
    shuffled = data[:, [2, 0, 1, 3, 4, 5]]
    permuted = dict(params)
    permuted["hgfa.g0.gatf.layer_bias"] = tc.Tensor(
        params["hgfa.g0.gatf.layer_bias"].data[[2, 0, 1]], requires_grad=True)

    base = hgfa_forward(TokenStack(data, (4, 4)), cfg, params)[0]
    moved = hgfa_forward(TokenStack(shuffled, (4, 4)), cfg, permuted)[0]
    np.testing.assert_allclose(moved.levels[0].data, base.levels[0].data, rtol=0, atol=1e-10)
    np.testing.assert_array_equal(moved.levels[1].data, base.levels[1].data)

    # without the matching bias the permutation is visible in its own level only
    unmatched = hgfa_forward(TokenStack(shuffled, (4, 4)), cfg, params)[0]
    assert not np.allclose(unmatched.levels[0].data, base.levels[0].data)
    np.testing.assert_array_equal(unmatched.levels[1].data, base.levels[1].data)


def test_adapter_free_baseline_keeps_level_shapes(cfg, stack):
    baseline = HgfaConfig(use_hgfa=False)
    params = init_hgfa_params(baseline, 32, 0)
    full = hgfa_forward(stack, cfg, params)[0]
    pyramids = hgfa_forward(stack, baseline, params)
    assert len(pyramids) == 2
    assert [level.shape for level in pyramids[0].levels] == [level.shape for level in full.levels]
    assert pyramids[0].flattened.shape == full.flattened.shape == (1360, 32)


def test_adapter_free_baseline_reads_only_the_last_layer_of_each_group(cfg, stack):
    params = init_hgfa_params(cfg, 32, 0)
    randomize_params(params, 0, scale=0.1)
    groups = partition_groups(stack, cfg)[0]
    pyramid = dpt_pyramid(groups, (8, 8), cfg, params)

    altered = stack.data.copy()
    altered[:, 0::2] += 5.0
    other = dpt_pyramid(partition_groups(TokenStack(altered, (8, 8)), cfg)[0], (8, 8), cfg, params)
    np.testing.assert_array_equal(other.flattened.data, pyramid.flattened.data)

    altered[:, 1] += 1.0
    other = dpt_pyramid(partition_groups(TokenStack(altered, (8, 8)), cfg)[0], (8, 8), cfg, params)
    assert not np.array_equal(other.levels[0].data, pyramid.levels[0].data)
    np.testing.assert_array_equal(other.levels[1].data, pyramid.levels[1].data)
