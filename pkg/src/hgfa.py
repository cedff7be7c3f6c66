"""
Hierarchical Geometric Feature Adapter

Turns a layerwise token stack into per-view multi-scale feature pyramids:

1. partition_groups   - K groups of M consecutive layers
2. gatf_fuse          - softmax-weighted fusion over a group's layers + LN
3. tatr_refine        - residual FFN with a group-specific expansion ratio
4. lsfp_spatial_block - depthwise conv, SE gate, residual pointwise conv
5. lsfp_pyramid       - projection + sinusoidal PE, resampling to tau_k,
                        projection to the target dimension, flattening

use_gatf, use_tatr and use_lsfp switch single stages off. use_hgfa = False
replaces the whole adapter with dpt_pyramid, a DPT-style reassembly of
each group's last layer. All views share one parameter set.
"""

import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from src import tensor_core as tc
from src.tensor_core import Tensor
from src.token_provider import TokenStack


@dataclass(frozen=True)
class HgfaConfig:
    """Adapter hyper-parameters (desk-scale defaults)."""
    groups: int = 4
    layers_per_group: int = 2
    expansion_ratios: Tuple[float, ...] = (4.0, 3.0, 2.0, 1.5)
    pyramid_dims: Tuple[int, ...] = (96, 64, 48, 32)
    scale_factors: Tuple[float, ...] = (4.0, 2.0, 1.0, 0.5)
    target_dim: int = 32
    se_reduction: int = 4
    dropout: float = 0.1
    use_gatf: bool = True
    use_tatr: bool = True
    use_lsfp: bool = True
    use_hgfa: bool = True

    def __post_init__(self):
        k = self.groups
        if k < 1 or self.layers_per_group < 1:
            raise ValueError("groups and layers_per_group must be positive")
        for name in ("expansion_ratios", "pyramid_dims", "scale_factors"):
            if len(getattr(self, name)) != k:
                raise ValueError(f"{name} needs {k} entries, got {len(getattr(self, name))}")
        for tau in self.scale_factors:
            if tau <= 0 or not math.log2(tau).is_integer():
                raise ValueError(f"scale factor {tau} is not a positive power of two")

    @property
    def num_layers(self) -> int:
        return self.groups * self.layers_per_group

    def hidden_dims(self, token_dim: int) -> List[int]:
        return [int(math.floor(rho * token_dim)) for rho in self.expansion_ratios]

    def level_extent(self, level: int, patch_grid: Tuple[int, int]) -> Tuple[int, int]:
        tau = self.scale_factors[level]
        h, w = patch_grid
        if not float(tau * h).is_integer() or not float(tau * w).is_integer():
            raise ValueError(f"scale factor {tau} gives a non-integral extent for a {h}x{w} grid")
        return int(tau * h), int(tau * w)

    def flattened_length(self, patch_grid: Tuple[int, int]) -> int:
        h, w = patch_grid
        return int(round(h * w * sum(tau * tau for tau in self.scale_factors)))


@dataclass
class FeaturePyramid:
    """K levels of (D, tau_k h, tau_k w) maps and their (sum, D) flattening."""
    levels: List[Tensor]
    flattened: Tensor


def _param(name: str, data: np.ndarray) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def init_hgfa_params(cfg: HgfaConfig, token_dim: int, seed: int) -> dict:
    """
    Named adapter parameters. Residual outputs (GATF scoring output, TATR
    second linear, LSFP residual pointwise conv) start at zero.
    """
    rng = np.random.default_rng([seed, 3])
    score_dim = max(1, token_dim // 4)
    reduced = max(1, token_dim // cfg.se_reduction)
    hidden_dims = cfg.hidden_dims(token_dim)
    params = {}

    def dense(shape, fan_in):
        return rng.standard_normal(shape) / math.sqrt(fan_in)

    for k in range(cfg.groups):
        p = f"hgfa.g{k}"
        entries = {
            "gatf.w1": dense((token_dim, score_dim), token_dim),
            "gatf.b1": np.zeros(score_dim),
            "gatf.w2": np.zeros((score_dim, 1)),
            "gatf.b2": np.zeros(1),
            "gatf.layer_bias": np.zeros(cfg.layers_per_group),
            "gatf.ln_gain": np.ones(token_dim),
            "gatf.ln_bias": np.zeros(token_dim),
            "tatr.w1": dense((token_dim, hidden_dims[k]), token_dim),
            "tatr.b1": np.zeros(hidden_dims[k]),
            "tatr.w2": np.zeros((hidden_dims[k], token_dim)),
            "tatr.b2": np.zeros(token_dim),
            "lsfp.dw": _identity_depthwise(token_dim) + 0.1 * dense((token_dim, 3, 3), 9),
            "lsfp.se_w1": dense((token_dim, reduced), token_dim),
            "lsfp.se_b1": np.zeros(reduced),
            "lsfp.se_w2": dense((reduced, token_dim), reduced),
            "lsfp.se_b2": np.zeros(token_dim),
            "lsfp.pw": np.zeros((token_dim, token_dim)),
        }
        pyramid_dim = cfg.pyramid_dims[k]
        tau = cfg.scale_factors[k]
        entries["pyr.proj"] = dense((pyramid_dim, token_dim), token_dim)
        entries["pyr.proj_b"] = np.zeros(pyramid_dim)
        if tau > 1:
            stride = int(tau)
            entries["pyr.resample"] = dense((pyramid_dim, pyramid_dim, stride, stride), pyramid_dim)
        elif tau < 1:
            stride = int(round(1 / tau))
            kernel = 2 * stride - 1
            entries["pyr.resample"] = dense((pyramid_dim, pyramid_dim, kernel, kernel),
                                            pyramid_dim * kernel * kernel)
        entries["pyr.out"] = dense((cfg.target_dim, pyramid_dim), pyramid_dim)
        entries["pyr.out_b"] = np.zeros(cfg.target_dim)
        entries["naive.proj"] = dense((cfg.target_dim, token_dim), token_dim)
        entries["naive.proj_b"] = np.zeros(cfg.target_dim)
        for name, data in entries.items():
            params[f"{p}.{name}"] = _param(f"{p}.{name}", data)
    return params


def _identity_depthwise(channels: int) -> np.ndarray:
    kernel = np.zeros((channels, 3, 3))
    kernel[:, 1, 1] = 1.0
    return kernel


def _token_tensor(stack: Union[TokenStack, Tensor]) -> Tensor:
    return stack if isinstance(stack, Tensor) else Tensor(stack.data)


def partition_groups(stack: Union[TokenStack, Tensor], cfg: HgfaConfig) -> List[List[Tensor]]:
    """
    Split layers into K consecutive groups.

    Returns:
        groups[view][k], each an (M, L, D^V) tensor holding layers
        k*M .. (k+1)*M - 1 in original order
    """
    tokens = _token_tensor(stack)
    layers = tokens.shape[1]
    if layers % cfg.groups or layers // cfg.groups != cfg.layers_per_group:
        raise ValueError(f"{layers} layers cannot form {cfg.groups} groups of "
                         f"{cfg.layers_per_group}")
    m = cfg.layers_per_group
    return [[tokens[view, k * m:(k + 1) * m] for k in range(cfg.groups)]
            for view in range(tokens.shape[0])]


def fusion_weights(group: Tensor, params: dict, prefix: str) -> Tensor:
    """(M, L) softmax-over-layers importance scores for one group."""
    hidden = tc.gelu(tc.linear(group, params[f"{prefix}.gatf.w1"], params[f"{prefix}.gatf.b1"]))
    scores = tc.linear(hidden, params[f"{prefix}.gatf.w2"], params[f"{prefix}.gatf.b2"])
    bias = tc.reshape(params[f"{prefix}.gatf.layer_bias"], (-1, 1))
    weights = tc.softmax(tc.add(tc.reshape(scores, scores.shape[:2]), bias), axis=0)
    if not np.all(np.isfinite(weights.data)):
        raise tc.NonFiniteError(f"{prefix}: fusion weights are not finite")
    return weights


def gatf_fuse(group: Tensor, params: dict, prefix: str, use_gatf: bool = True) -> Tensor:
    """LN(sum_m w_m * G_m), weights broadcast over channels; (L, D^V) out."""
    gain, bias = params[f"{prefix}.gatf.ln_gain"], params[f"{prefix}.gatf.ln_bias"]
    if not use_gatf:
        return tc.layer_norm(group[group.shape[0] - 1], gain, bias)
    weights = fusion_weights(group, params, prefix)
    fused = tc.sum(tc.mul(tc.reshape(weights, weights.shape + (1,)), group), axis=0)
    return tc.layer_norm(fused, gain, bias)


def tatr_refine(fused: Tensor, params: dict, prefix: str, dropout: float, training: bool,
                seed: int = 0, step: int = 0, key: str = "") -> Tensor:
    """x + Linear(Dropout(GELU(Linear(x))))."""
    hidden = tc.gelu(tc.linear(fused, params[f"{prefix}.tatr.w1"], params[f"{prefix}.tatr.b1"]))
    hidden = tc.dropout(hidden, dropout, seed, key or f"{prefix}.tatr", step, training)
    return tc.add(fused, tc.linear(hidden, params[f"{prefix}.tatr.w2"], params[f"{prefix}.tatr.b2"]))


def _channel_bias(bias: Tensor) -> Tensor:
    return tc.reshape(bias, (-1, 1, 1))


def lsfp_spatial_block(refined: Tensor, patch_grid: Tuple[int, int], params: dict,
                       prefix: str, se_bypass: bool = False) -> Tensor:
    """
    F_hat = F' + PW(SE(DW(F'))) on the row-major (D^V, h, w) reshape F'.

    se_bypass replaces the SE gate with all-ones.
    """
    h, w = patch_grid
    tokens, channels = refined.shape
    if tokens != h * w:
        raise ValueError(f"{tokens} tokens do not fill a {h}x{w} patch grid")
    spatial = tc.reshape(tc.transpose(refined), (channels, h, w))
    local = tc.conv2d(spatial, params[f"{prefix}.lsfp.dw"], "depthwise", stride=1, padding=1)
    if not se_bypass:
        pooled = tc.reshape(tc.global_avg_pool(local), (1, channels))
        squeeze = tc.relu(tc.linear(pooled, params[f"{prefix}.lsfp.se_w1"],
                                    params[f"{prefix}.lsfp.se_b1"]))
        gate = tc.sigmoid(tc.linear(squeeze, params[f"{prefix}.lsfp.se_w2"],
                                    params[f"{prefix}.lsfp.se_b2"]))
        local = tc.mul(local, tc.reshape(gate, (channels, 1, 1)))
    mixed = tc.conv2d(local, params[f"{prefix}.lsfp.pw"], "pointwise")
    return tc.add(spatial, mixed)


def sinusoidal_embedding(channels: int, height: int, width: int) -> np.ndarray:
    """
    Fixed 2D sinusoidal embedding, (channels, height, width).

    The first half of the channels encodes the row, the second half the
    column; each half is split into sin and cos over frequencies spaced
    geometrically from 1 down to 1e-4 (periods 2*pi .. 2*pi*1e4).
    """
    embedding = np.zeros((channels, height, width))
    row_channels = channels // 2
    for start, size, positions, axis in ((0, row_channels, np.arange(height), 1),
                                         (row_channels, channels - row_channels, np.arange(width), 2)):
        pairs = size // 2
        if pairs == 0:
            continue
        freqs = 1e4 ** (-np.arange(pairs) / max(pairs - 1, 1))
        angles = freqs[:, None] * positions[None, :]
        block = np.concatenate([np.sin(angles), np.cos(angles)], axis=0)
        shape = (2 * pairs, height, 1) if axis == 1 else (2 * pairs, 1, width)
        embedding[start:start + 2 * pairs] = block.reshape(shape)
    return embedding


def _resample(feature: Tensor, tau: float, params: dict, prefix: str) -> Tensor:
    if tau == 1:
        return feature
    kernel = params[f"{prefix}.pyr.resample"]
    if tau > 1:
        stride = int(tau)
        return tc.conv2d(feature, kernel, "transposed", stride=stride, padding=0)
    stride = int(round(1 / tau))
    return tc.conv2d(feature, kernel, "strided", stride=stride, padding=stride - 1)


def _flatten(levels: List[Tensor]) -> Tensor:
    return tc.concat([tc.transpose(tc.reshape(level, (level.shape[0], -1))) for level in levels],
                     axis=0)


def lsfp_pyramid(spatial_maps: Sequence[Tensor], cfg: HgfaConfig, params: dict) -> FeaturePyramid:
    """
    Per level: F~ = PW(F^) + PE_k, F- = R_k(F~), F = PW(F-) at D channels;
    flattened level 1..K, row-major within a level.
    """
    levels = []
    for k, spatial in enumerate(spatial_maps):
        prefix = f"hgfa.g{k}"
        _, h, w = spatial.shape
        target = cfg.level_extent(k, (h, w))
        projected = tc.add(tc.conv2d(spatial, params[f"{prefix}.pyr.proj"], "pointwise"),
                           _channel_bias(params[f"{prefix}.pyr.proj_b"]))
        projected = tc.add(projected, sinusoidal_embedding(projected.shape[0], h, w))
        resampled = _resample(projected, cfg.scale_factors[k], params, prefix)
        if resampled.shape[1:] != target:
            raise ValueError(f"level {k} resampled to {resampled.shape[1:]}, expected {target}")
        levels.append(tc.add(tc.conv2d(resampled, params[f"{prefix}.pyr.out"], "pointwise"),
                             _channel_bias(params[f"{prefix}.pyr.out_b"])))
    return FeaturePyramid(levels, _flatten(levels))


def naive_pyramid(refined: Sequence[Tensor], patch_grid: Tuple[int, int], cfg: HgfaConfig,
                  params: dict) -> FeaturePyramid:
    """LSFP ablation: reshape, project to D, bilinearly resize to each level extent."""
    h, w = patch_grid
    levels = []
    for k, tokens in enumerate(refined):
        prefix = f"hgfa.g{k}"
        spatial = tc.reshape(tc.transpose(tokens), (tokens.shape[1], h, w))
        projected = tc.add(tc.conv2d(spatial, params[f"{prefix}.naive.proj"], "pointwise"),
                           _channel_bias(params[f"{prefix}.naive.proj_b"]))
        out_h, out_w = cfg.level_extent(k, patch_grid)
        rows, cols = np.meshgrid((np.arange(out_h) + 0.5) / out_h, (np.arange(out_w) + 0.5) / out_w,
                                 indexing="ij")
        uv = Tensor(np.stack([cols.reshape(-1), rows.reshape(-1)], axis=1))
        sampled = tc.bilinear_sample(projected, uv)
        levels.append(tc.reshape(tc.transpose(sampled), (cfg.target_dim, out_h, out_w)))
    return FeaturePyramid(levels, _flatten(levels))


def dpt_pyramid(groups: Sequence[Tensor], patch_grid: Tuple[int, int], cfg: HgfaConfig,
                params: dict) -> FeaturePyramid:
    """
    Adapter-free baseline. Level k reads the last layer of group k, then
    applies a 1x1 projection to D_k^H, the tau_k resampling conv and a 1x1
    projection to D. No fusion, refinement, SE gate or positional embedding.
    """
    h, w = patch_grid
    levels = []
    for k, group in enumerate(groups):
        prefix = f"hgfa.g{k}"
        tokens = group[group.shape[0] - 1]
        if tokens.shape[0] != h * w:
            raise ValueError(f"{tokens.shape[0]} tokens do not fill a {h}x{w} patch grid")
        spatial = tc.reshape(tc.transpose(tokens), (tokens.shape[1], h, w))
        projected = tc.add(tc.conv2d(spatial, params[f"{prefix}.pyr.proj"], "pointwise"),
                           _channel_bias(params[f"{prefix}.pyr.proj_b"]))
        resampled = _resample(projected, cfg.scale_factors[k], params, prefix)
        levels.append(tc.add(tc.conv2d(resampled, params[f"{prefix}.pyr.out"], "pointwise"),
                             _channel_bias(params[f"{prefix}.pyr.out_b"])))
    return FeaturePyramid(levels, _flatten(levels))


def hgfa_forward(stack: Union[TokenStack, Tensor], cfg: HgfaConfig, params: dict,
                 training: bool = False, patch_grid: Optional[Tuple[int, int]] = None,
                 seed: int = 0, step: int = 0) -> List[FeaturePyramid]:
    """
    Full adapter, run independently per view with shared parameters.

    Args:
        stack: TokenStack, or an (S, N, L, D^V) Tensor together with patch_grid
        cfg: Adapter configuration
        params: Parameters from init_hgfa_params
        training: Enables dropout
        patch_grid: Required when stack is a Tensor
        seed, step: Dropout mask keys

    Returns:
        One FeaturePyramid per view
    """
    grid = patch_grid if patch_grid is not None else stack.patch_grid
    pyramids = []
    for view, groups in enumerate(partition_groups(stack, cfg)):
        if not cfg.use_hgfa:
            pyramids.append(dpt_pyramid(groups, grid, cfg, params))
            continue
        refined = []
        for k, group in enumerate(groups):
            prefix = f"hgfa.g{k}"
            fused = gatf_fuse(group, params, prefix, cfg.use_gatf)
            if cfg.use_tatr:
                fused = tatr_refine(fused, params, prefix, cfg.dropout, training, seed, step,
                                    key=f"{prefix}.tatr.v{view}")
            refined.append(fused)
        if cfg.use_lsfp:
            spatial = [lsfp_spatial_block(tokens, grid, params, f"hgfa.g{k}")
                       for k, tokens in enumerate(refined)]
            pyramids.append(lsfp_pyramid(spatial, cfg, params))
        else:
            pyramids.append(naive_pyramid(refined, grid, cfg, params))
    return pyramids
