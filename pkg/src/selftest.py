"""
Invariant and Gradient Self-Test

Handles:
- Finite-difference checks of every differentiable op and of the full
  tokens -> loss composite over several seeds
- Fusion-weight normalization, pyramid shape law, full-profile validation
- Splatting against the brute-force oracle, culling tail bound
- Lovasz hypercube property, metric arithmetic
- Exact pass-through of zero-initialized residual heads
- Worker-count independence of splatting and metric accumulation

Each check prints an [OK] / [FAIL] line; run_selftest returns False if
any check failed.
"""

import time
from typing import Callable, Dict, List, Tuple

import numpy as np

from src import tensor_core as tc
from src.gaussian_scene import (GaussianSet, GridSpec, VoxelGrid, culling_error_bound,
                                decode_gaussians, init_decoder_params, lattice_init,
                                semantic_distribution, splat, splat_oracle, splat_tensors)
from src.hgfa import (HgfaConfig, fusion_weights, hgfa_forward, init_hgfa_params,
                      lsfp_spatial_block, tatr_refine)
from src.main import forward, init_params, prepare_data
from src.objective_metrics import (ConfusionMatrix, accumulate, cross_entropy, loss_terms,
                                   lovasz_per_class, lovasz_softmax, miou, per_class_iou,
                                   sc_iou)
from src.run_config import RunConfig, config_from_values
from src.synthetic_scene import SceneBox, SyntheticScene
from src.token_provider import TokenStack

GRADIENT_TOLERANCE = 1e-4
GRADIENT_SEEDS = (0, 1, 2, 3, 4)

TINY_CONFIG = {
    "views": 2,
    "layers": 2,
    "patch_h": 2,
    "patch_w": 2,
    "token_dim": 4,
    "image_h": 8,
    "image_w": 8,
    "camera_height": 0.5,
    "groups": 2,
    "layers_per_group": 1,
    "expansion_ratios": (2.0, 1.5),
    "pyramid_dims": (3, 3),
    "scale_factors": (2.0, 0.5),
    "target_dim": 3,
    "se_reduction": 2,
    "dropout": 0.0,
    "decoder_blocks": 1,
    "decoder_hidden": 4,
    "grid_dims": (4, 4, 2),
    "grid_origin": (-2.0, -2.0, -1.0),
    "voxel_size": 1.0,
    "num_gaussians": 6,
    "num_classes": 2,
    "class_names": ("ground", "box"),
    "init_scale_factor": 1.0,
    "cull_kappa": float("inf"),
    "total_steps": 4,
    "warmup_steps": 1,
}


def tiny_config(seed: int = 0, **overrides) -> RunConfig:
    """Smallest configuration that exercises every pipeline stage."""
    values = dict(TINY_CONFIG, seed=seed)
    values.update(overrides)
    return config_from_values(values)


def tiny_scene(cfg: RunConfig) -> SyntheticScene:
    return SyntheticScene(cfg.grid, cfg.scene.num_classes, ground_height=0.0, ground_label=0,
                          boxes=[SceneBox(1, (1.0, 1.0, 0.5), (2.0, 2.0, 1.0))])


def randomize_params(params: Dict[str, tc.Tensor], seed: int, scale: float = 0.3) -> None:
    """Move every parameter off its initialization so no gradient path is zero."""
    rng = np.random.default_rng([seed, 99])
    for name in sorted(params):
        param = params[name]
        param.data = param.data + scale * rng.standard_normal(param.shape)


# ---------------------------------------------------------------------------
# Individual checks
# ---------------------------------------------------------------------------

# rows, cols, inner, channels, side, classes
OP_SHAPES = (
    (3, 4, 5, 3, 4, 3),
    (2, 5, 1, 2, 3, 2),
    (4, 3, 3, 4, 2, 4),
)


def _shape_cases(rng, n, d, inner, ch, side, k) -> List[Tuple[str, Callable, List[tc.Tensor]]]:
    def t(*shape, positive=False):
        data = rng.standard_normal(shape)
        return tc.Tensor(np.abs(data) + 0.5 if positive else data, requires_grad=True)

    a, b = t(n, d), t(n, d)
    p = t(n, d, positive=True)
    m1, m2 = t(n, inner), t(inner, 2)
    w, bias = t(d, 3), t(3)
    gain, shift = t(d), t(d)
    img = t(ch, side, side)
    dw = t(ch, 3, 3)
    pw = t(2, ch)
    st = t(2, 2, 3, 3)
    tr = t(ch, 2, 2, 2)
    uv = tc.Tensor(rng.uniform(0.1, 0.9, size=(n + 2, 2)), requires_grad=True)
    probs = tc.Tensor(rng.dirichlet(np.ones(k), size=n + 3), requires_grad=True)
    gt = rng.integers(0, k, size=n + 3)
    rows = np.arange(2 * d) % d

    return [
        ("add/sub/mul/div", lambda: tc.sum(tc.div(tc.mul(tc.sub(a, b), tc.add(a, 1.0)), p)), [a, b, p]),
        ("exp/log/sqrt", lambda: tc.sum(tc.add(tc.exp(tc.mul(a, 0.3)), tc.mul(tc.log(p), tc.sqrt(p)))), [a, p]),
        ("tanh/sigmoid/gelu/relu", lambda: tc.sum(tc.mul(tc.tanh(a), tc.add(tc.sigmoid(b), tc.gelu(a)))) + tc.sum(tc.relu(b)), [a, b]),
        ("softmax", lambda: tc.sum(tc.mul(tc.softmax(a, axis=1), b)), [a]),
        ("reshape/transpose/concat/stack/index",
         lambda: tc.sum(tc.mul(tc.concat([tc.transpose(a), tc.reshape(b, (d, n))], axis=0),
                               tc.stack([a[i] if i % 2 == 0 else b[i] for i in range(n)], axis=1)[rows])), [a, b]),
        ("matmul/linear", lambda: tc.sum(tc.tanh(tc.linear(tc.matmul(m1, m2) @ tc.Tensor(np.ones((2, d))), w, bias))), [m1, m2, w, bias]),
        ("mean/layer_norm", lambda: tc.mean(tc.mul(tc.layer_norm(tc.transpose(a), tc.Tensor(np.ones(n)), tc.Tensor(np.zeros(n))), 1.0)) + tc.sum(tc.mul(tc.layer_norm(b, gain, shift), a)), [a, b, gain, shift]),
        ("conv2d depthwise/pointwise", lambda: tc.sum(tc.tanh(tc.conv2d(tc.conv2d(img, dw, "depthwise", padding=1), pw, "pointwise"))), [img, dw, pw]),
        ("conv2d strided/transposed", lambda: tc.sum(tc.tanh(tc.conv2d(tc.conv2d(img, tr, "transposed", stride=2), st, "strided", stride=2, padding=1))), [img, st, tr]),
        ("global_avg_pool/bilinear_sample", lambda: tc.sum(tc.mul(tc.bilinear_sample(img, uv), 1.5)) + tc.sum(tc.tanh(tc.global_avg_pool(img))), [img, uv]),
        ("cross_entropy/lovasz_softmax", lambda: tc.add(cross_entropy(probs, gt), lovasz_softmax(probs, gt)), [probs]),
    ]


def _op_cases(rng) -> List[Tuple[str, Callable, List[tc.Tensor]]]:
    """Every differentiable op family, once per entry of OP_SHAPES."""
    cases = []
    for shape in OP_SHAPES:
        label = "x".join(str(s) for s in shape)
        cases += [(f"{name} [{label}]", fn, inputs)
                  for name, fn, inputs in _shape_cases(rng, *shape)]
    return cases


def check_op_gradients() -> Tuple[bool, str]:
    worst = 0.0
    worst_name = ""
    for seed in GRADIENT_SEEDS:
        for name, fn, inputs in _op_cases(np.random.default_rng(seed)):
            error = tc.check_gradients(fn, inputs)
            if error > worst:
                worst, worst_name = error, name
    return worst < GRADIENT_TOLERANCE, f"worst relative error {worst:.2e} ({worst_name or 'all exact'})"


def _random_gaussians(rng, count: int, grid, num_classes: int) -> GaussianSet:
    means = rng.uniform(grid.lower, grid.upper, size=(count, 3))
    quats = rng.standard_normal((count, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    return GaussianSet.from_opacities(means, rng.uniform(0.4, 1.5, size=(count, 3)), quats,
                                      rng.uniform(0.1, 0.9, size=count),
                                      rng.standard_normal((count, num_classes)))


def check_splat_gradients() -> Tuple[bool, str]:
    spec = GridSpec((4, 4, 3), (-2.0, -2.0, -1.5), 1.0)
    worst = 0.0
    for seed in GRADIENT_SEEDS:
        rng = np.random.default_rng(seed)
        g = _random_gaussians(rng, 5, spec, 3)
        tensors = [tc.Tensor(x, requires_grad=True) for x in
                   (g.means, g.scales, g.rotations, g.opacities, g.logits)]
        weights = rng.standard_normal((spec.num_voxels, 4))

        def fn():
            field = splat_tensors(*tensors, spec, cull_kappa=float("inf"))
            return tc.sum(tc.mul(field, weights))

        worst = max(worst, tc.check_gradients(fn, tensors))
    return worst < GRADIENT_TOLERANCE, f"worst relative error {worst:.2e}"


def check_composite_gradient() -> Tuple[bool, str]:
    worst = 0.0
    checked = ("anchors.means", "anchors.log_scales", "anchors.rotations",
               "anchors.opacity_logits", "anchors.logits", "decoder.b0.w1", "decoder.b0.w2",
               "hgfa.g0.gatf.w1", "hgfa.g1.tatr.w2", "hgfa.g1.lsfp.pw", "hgfa.g0.pyr.out")
    for seed in GRADIENT_SEEDS:
        cfg = tiny_config(seed)
        data = prepare_data(cfg, tiny_scene(cfg))
        params = init_params(cfg)
        randomize_params(params, seed)
        gt = data.gt.labels.reshape(-1)

        def fn():
            _, field = forward(cfg, data, params)
            return loss_terms(semantic_distribution(field), gt, cfg.loss)["total"]

        worst = max(worst, tc.check_gradients(fn, [params[n] for n in checked]))
    return worst < GRADIENT_TOLERANCE, f"worst relative error {worst:.2e} over {len(GRADIENT_SEEDS)} seeds"


def check_fusion_weights() -> Tuple[bool, str]:
    cfg = HgfaConfig(groups=1, layers_per_group=4, expansion_ratios=(2.0,), pyramid_dims=(8,),
                     scale_factors=(1.0,), target_dim=8)
    worst = 0.0
    for seed in range(100):
        rng = np.random.default_rng(seed)
        params = init_hgfa_params(cfg, 8, seed)
        randomize_params(params, seed, scale=1.0)
        group = tc.Tensor(rng.standard_normal((4, 6, 8)) * 3.0)
        weights = fusion_weights(group, params, "hgfa.g0")
        worst = max(worst, float(np.max(np.abs(weights.data.sum(axis=0) - 1.0))))
    return worst <= 1e-10, f"max |sum - 1| = {worst:.1e} over 100 stacks"


def check_shape_law() -> Tuple[bool, str]:
    cfg = RunConfig().hgfa
    expected = cfg.flattened_length((8, 8))
    rng = np.random.default_rng(0)
    stack = TokenStack(rng.standard_normal((1, cfg.num_layers, 64, 32)), (8, 8))
    pyramid = hgfa_forward(stack, cfg, init_hgfa_params(cfg, 32, 0))[0]
    actual = pyramid.flattened.shape[0]
    return expected == 1360 and actual == 1360, f"flattened tokens {actual} (expected 1360)"


def check_full_profile() -> Tuple[bool, str]:
    cfg = config_from_values({"profile": "full"})
    ok = (cfg.hgfa.groups == 4 and cfg.hgfa.layers_per_group == 6 and cfg.tokens.layers == 24
          and cfg.hgfa.pyramid_dims == (768, 512, 384, 256) and cfg.hgfa.target_dim == 128
          and cfg.scene.num_gaussians == 25600 and cfg.grid.dims == (200, 200, 16))
    return ok, "K=4 M=6 N=24 D=128 J=25600 grid 200x200x16 validates"


def check_splat_oracle() -> Tuple[bool, str]:
    spec = GridSpec((8, 8, 4), (-4.0, -4.0, -2.0), 1.0)
    worst_exact = 0.0
    tail_ok = True
    for seed in range(3):
        g = _random_gaussians(np.random.default_rng(seed), 32, spec, 3)
        oracle = splat_oracle(g, spec)
        exact = splat(g, spec, cull_kappa=float("inf"))
        worst_exact = max(worst_exact, float(np.max(np.abs(exact.occupancy - oracle.occupancy))))
        culled = splat(g, spec, cull_kappa=3.0)
        bound = culling_error_bound(g.opacities, 3.0)
        tail_ok &= bool(np.all(oracle.occupancy - culled.occupancy <= bound + 1e-12))
    return worst_exact <= 1e-12 and tail_ok, \
        f"max |kappa=inf - oracle| = {worst_exact:.1e}, kappa=3 within tail bound: {tail_ok}"


def check_lovasz_hypercube() -> Tuple[bool, str]:
    worst = 0.0
    for seed in range(50):
        rng = np.random.default_rng(seed)
        classes = 4
        gt = rng.integers(0, classes, size=40)
        pred = rng.integers(0, classes, size=40)
        probs = np.eye(classes)[pred]
        for c, loss in lovasz_per_class(probs, gt).items():
            inter = np.sum((gt == c) & (pred == c))
            union = np.sum((gt == c) | (pred == c))
            worst = max(worst, abs(loss - (1.0 - inter / union)))
    return worst <= 1e-9, f"max |lovasz - (1 - jaccard)| = {worst:.1e} over 50 predictions"


def check_metric_arithmetic() -> Tuple[bool, str]:
    counts = np.zeros((3, 3), dtype=np.int64)
    counts[0, 0] = 3   # TP class 0
    counts[2, 0] = 1   # FP class 0 (empty predicted as 0)
    counts[0, 2] = 2   # FN class 0
    cm = ConfusionMatrix(2, counts)
    iou = per_class_iou(cm)[0]

    cfg = tiny_config()
    gt = tiny_scene(cfg).rasterize()
    self_cm = accumulate(ConfusionMatrix(2), gt, gt)
    geometry, _ = sc_iou(self_cm)
    ok = iou == 0.5 and geometry == 1.0 and miou(self_cm) == 1.0
    return ok, f"TP=3 FP=1 FN=2 -> {iou}; self-evaluation SC IoU {geometry}, mIoU {miou(self_cm)}"


def check_identity_inits() -> Tuple[bool, str]:
    rng = np.random.default_rng(0)
    cfg = tiny_config()
    params = init_hgfa_params(cfg.hgfa, 4, 0)
    tokens = tc.Tensor(rng.standard_normal((4, 4)))
    refined = tatr_refine(tokens, params, "hgfa.g0", 0.0, False)
    tatr_ok = refined.data.tobytes() == tokens.data.tobytes()

    spatial = lsfp_spatial_block(tokens, (2, 2), params, "hgfa.g0")
    reshaped = tokens.data.T.reshape(4, 2, 2)
    lsfp_ok = spatial.data.tobytes() == np.ascontiguousarray(reshaped).tobytes()

    data = prepare_data(cfg, tiny_scene(cfg))
    pyramids = hgfa_forward(data.tokens, cfg.hgfa, init_hgfa_params(cfg.hgfa, 4, 0))
    init = lattice_init(cfg.grid, cfg.scene.num_gaussians, cfg.scene.num_classes, 0)
    decoder_params = init_decoder_params(cfg.decoder, cfg.hgfa.target_dim, cfg.scene.num_classes, 0)
    decoded = decode_gaussians(pyramids, data.rig, init, cfg.decoder, decoder_params, cfg.grid).to_set()
    decoder_ok = all(getattr(decoded, name).tobytes() == getattr(init, name).tobytes()
                     for name in ("means", "scales", "rotations", "opacity_logits", "logits"))
    return tatr_ok and lsfp_ok and decoder_ok, \
        f"TATR {tatr_ok}, LSFP {lsfp_ok}, decoder {decoder_ok}"


def check_parallel_determinism() -> Tuple[bool, str]:
    spec = GridSpec((8, 8, 4), (-4.0, -4.0, -2.0), 1.0)
    g = _random_gaussians(np.random.default_rng(7), 48, spec, 3)
    grids = [splat(g, spec, cull_kappa=3.0, workers=n) for n in (1, 2, 8)]
    splat_ok = all(np.array_equal(grids[0].occupancy, x.occupancy)
                   and np.array_equal(grids[0].semantics, x.semantics) for x in grids[1:])

    rng = np.random.default_rng(8)
    pred = VoxelGrid(spec, 3, labels=rng.integers(0, 4, size=spec.dims))
    gt = VoxelGrid(spec, 3, labels=rng.integers(0, 4, size=spec.dims))
    matrices = [accumulate(ConfusionMatrix(3), pred, gt, workers=n).counts for n in (1, 2, 8)]
    metrics_ok = all(np.array_equal(matrices[0], m) for m in matrices[1:])
    return splat_ok and metrics_ok, f"splat identical {splat_ok}, confusion identical {metrics_ok}"


CHECKS: List[Tuple[str, Callable[[], Tuple[bool, str]]]] = [
    ("op gradients", check_op_gradients),
    ("splat gradients", check_splat_gradients),
    ("composite gradient", check_composite_gradient),
    ("fusion weights", check_fusion_weights),
    ("pyramid shape law", check_shape_law),
    ("full profile", check_full_profile),
    ("splat oracle", check_splat_oracle),
    ("lovasz hypercube", check_lovasz_hypercube),
    ("metric arithmetic", check_metric_arithmetic),
    ("identity initializations", check_identity_inits),
    ("parallel determinism", check_parallel_determinism),
]


def run_selftest(verbose: bool = True) -> bool:
    """Run every check; True if all pass."""
    if verbose:
        print("=" * 80)
        print("SELF-TEST")
        print("=" * 80)
    failures = 0
    start = time.time()
    for name, check in CHECKS:
        try:
            passed, detail = check()
        except Exception as e:
            passed, detail = False, f"{type(e).__name__}: {e}"
        failures += 0 if passed else 1
        if verbose:
            print(f"[{'OK' if passed else 'FAIL'}] {name}: {detail}")
    if verbose:
        print("=" * 80)
        print(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed "
              f"in {time.time() - start:.1f}s")
    return failures == 0
