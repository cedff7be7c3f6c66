"""
Semantic 3D Gaussian Primitives and Gaussian-to-Voxel Splatting

Handles:
- Voxel grid geometry (GridSpec) and voxel payloads (VoxelGrid)
- GaussianSet primitives and their covariance matrices
- Jittered-lattice initialization
- A view-guided decoder refining primitives from feature pyramids
- Probabilistic splatting with box culling, its analytic backward pass,
  and a brute-force oracle
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit, logit

from src import tensor_core as tc
from src.tensor_core import Tensor
from src.token_provider import CameraRig

ORACLE_MAX_GAUSSIANS = 1000
ORACLE_MAX_VOXELS = 32 ** 3


# ---------------------------------------------------------------------------
# Grid geometry
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned voxel grid: dims (X, Y, Z), min-corner origin, cubic voxels."""
    dims: Tuple[int, int, int] = (32, 32, 8)
    origin: Tuple[float, float, float] = (-16.0, -16.0, -2.0)
    voxel_size: float = 1.0

    @property
    def num_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=np.float64)

    @property
    def upper(self) -> np.ndarray:
        return self.lower + np.asarray(self.dims, dtype=np.float64) * self.voxel_size

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    def axis_centers(self, axis: int) -> np.ndarray:
        return self.origin[axis] + (np.arange(self.dims[axis]) + 0.5) * self.voxel_size

    def voxel_centers(self) -> np.ndarray:
        """(X*Y*Z, 3) voxel centres in row-major (x, y, z) order."""
        xs, ys, zs = (self.axis_centers(a) for a in range(3))
        grid = np.stack(np.meshgrid(xs, ys, zs, indexing="ij"), axis=-1)
        return grid.reshape(-1, 3)


@dataclass
class VoxelGrid:
    """
    Dense voxel payload.

    labels: (X, Y, Z) ints in [0, num_classes]; num_classes means empty
    occupancy: (X, Y, Z) probabilities in [0, 1]
    semantics: (X, Y, Z, num_classes) class distributions
    """
    spec: GridSpec
    num_classes: int
    labels: Optional[np.ndarray] = None
    occupancy: Optional[np.ndarray] = None
    semantics: Optional[np.ndarray] = None

    @property
    def empty_label(self) -> int:
        return self.num_classes


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

@dataclass
class GaussianSet:
    """
    J semantic Gaussians.

    means (J, 3) metres; scales (J, 3) metres; rotations (J, 4) unit
    quaternions (w, x, y, z); opacity_logits (J,) pre-sigmoid opacity;
    logits (J, C) semantic logits.
    """
    means: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    logits: np.ndarray

    def __post_init__(self):
        count = self.means.shape[0]
        shapes = {"means": (count, 3), "scales": (count, 3), "rotations": (count, 4),
                  "opacity_logits": (count,)}
        for name, shape in shapes.items():
            if getattr(self, name).shape != shape:
                raise ValueError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.logits.ndim != 2 or self.logits.shape[0] != count:
            raise ValueError(f"logits has shape {self.logits.shape}, expected ({count}, C)")

    @property
    def count(self) -> int:
        return self.means.shape[0]

    @property
    def num_classes(self) -> int:
        return self.logits.shape[1]

    @property
    def opacities(self) -> np.ndarray:
        return expit(self.opacity_logits)

    def as_tensors(self, requires_grad: bool = False) -> "GaussianTensors":
        return GaussianTensors(*(Tensor(np.array(getattr(self, name)), requires_grad=requires_grad,
                                        name=f"gaussians.{name}")
                                 for name in GAUSSIAN_FIELDS))

    @staticmethod
    def from_opacities(means, scales, rotations, opacities, logits) -> "GaussianSet":
        clipped = np.clip(np.asarray(opacities, dtype=np.float64), 1e-12, 1.0 - 1e-12)
        return GaussianSet(np.asarray(means, dtype=np.float64), np.asarray(scales, dtype=np.float64),
                           np.asarray(rotations, dtype=np.float64), logit(clipped),
                           np.asarray(logits, dtype=np.float64))


GAUSSIAN_FIELDS = ("means", "scales", "rotations", "opacity_logits", "logits")


@dataclass
class GaussianTensors:
    """GaussianSet fields held as tape tensors."""
    means: Tensor
    scales: Tensor
    rotations: Tensor
    opacity_logits: Tensor
    logits: Tensor

    def to_set(self) -> GaussianSet:
        return GaussianSet(*(np.array(getattr(self, name).data) for name in GAUSSIAN_FIELDS))

    def tensors(self) -> List[Tensor]:
        return [getattr(self, name) for name in GAUSSIAN_FIELDS]


def quaternion_to_rotation(quats: np.ndarray) -> np.ndarray:
    """(..., 4) unit quaternions (w, x, y, z) to (..., 3, 3) rotation matrices."""
    w, x, y, z = np.moveaxis(quats, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1),
    ], axis=-2)


def _rotation_jacobian(quats: np.ndarray) -> np.ndarray:
    """(..., 4, 3, 3): derivative of each rotation entry w.r.t. w, x, y, z."""
    w, x, y, z = np.moveaxis(quats, -1, 0)
    zero = np.zeros_like(w)
    rows = [
        [[zero, -z, y], [z, zero, -x], [-y, x, zero]],
        [[zero, y, z], [y, -2 * x, -w], [z, w, -2 * x]],
        [[-2 * y, x, w], [x, zero, z], [-w, z, -2 * y]],
        [[-2 * z, -w, x], [w, -2 * z, y], [x, y, zero]],
    ]
    return 2.0 * np.stack([np.stack([np.stack(r, axis=-1) for r in block], axis=-2)
                           for block in rows], axis=-3)


def normalize_quaternions(quats: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(quats, axis=-1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValueError("near-zero quaternion cannot be normalized")
    return quats / norms


def covariance_from(scales: np.ndarray, quats: np.ndarray) -> np.ndarray:
    """
    Covariance R(r) diag(s^2) R(r)^T for one or many primitives.

    Args:
        scales: (..., 3) positive scales
        quats: (..., 4) rotation quaternions (normalized here)

    Returns:
        (..., 3, 3) symmetric positive definite matrices
    """
    rotation = quaternion_to_rotation(normalize_quaternions(np.asarray(quats, dtype=np.float64)))
    scaled = rotation * (np.asarray(scales, dtype=np.float64) ** 2)[..., None, :]
    return scaled @ np.swapaxes(rotation, -1, -2)


def lattice_init(spec: GridSpec, count: int, num_classes: int, seed: int,
                 scale_factor: float = 1.5, opacity: float = 0.1,
                 jitter: float = 0.25) -> GaussianSet:
    """
    Jittered-lattice initialization over the grid volume.

    The lattice has at least `count` cells with per-axis counts roughly
    proportional to the grid dims; when it has more, a seeded subset of
    cells is kept (in ascending cell order).
    """
    dims = np.asarray(spec.dims, dtype=np.float64)
    factor = (count / spec.num_voxels) ** (1.0 / 3.0)
    per_axis = np.maximum(1, np.floor(dims * factor)).astype(np.int64)
    while np.prod(per_axis) < count:
        per_axis[np.argmax(dims / per_axis)] += 1

    rng = np.random.default_rng(seed)
    cells = int(np.prod(per_axis))
    chosen = np.sort(rng.choice(cells, size=count, replace=False)) if cells > count \
        else np.arange(cells)
    index = np.stack(np.unravel_index(chosen, tuple(per_axis)), axis=1).astype(np.float64)
    offsets = rng.uniform(-jitter, jitter, size=index.shape)
    step = (spec.upper - spec.lower) / per_axis
    means = spec.lower + (index + 0.5 + offsets) * step

    rotations = np.zeros((count, 4))
    rotations[:, 0] = 1.0
    return GaussianSet(means=means,
                       scales=np.full((count, 3), scale_factor * spec.voxel_size),
                       rotations=rotations,
                       opacity_logits=np.full(count, logit(opacity)),
                       logits=np.zeros((count, num_classes)))


# ---------------------------------------------------------------------------
# Splatting
# ---------------------------------------------------------------------------

@dataclass
class SplatContext:
    """Per-pair quantities kept from the forward pass for the backward pass."""
    spec: GridSpec
    count: int
    gauss: np.ndarray
    voxel: np.ndarray
    offsets: np.ndarray
    local: np.ndarray
    quats: np.ndarray
    norms: np.ndarray
    rotation: np.ndarray
    scales: np.ndarray
    opacities: np.ndarray
    gaussian_term: np.ndarray
    alpha: np.ndarray
    probs: np.ndarray
    log_transmit: np.ndarray
    alpha_sum: np.ndarray
    occupancy: np.ndarray
    semantics: np.ndarray


def _contributing_pairs(means: np.ndarray, scales: np.ndarray, spec: GridSpec,
                        cull_kappa: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    (gaussian, voxel) pairs ordered by Gaussian index, then voxel index.

    With a finite kappa, Gaussian i touches the voxels whose centres lie in
    the box of half-width kappa * max(s_i) around m_i.
    """
    dims = np.asarray(spec.dims)
    gauss_parts, voxel_parts = [], []
    full = [np.arange(d) for d in spec.dims]
    for i in range(means.shape[0]):
        if np.isinf(cull_kappa):
            ranges = full
        else:
            radius = cull_kappa * scales[i].max()
            lo = np.ceil((means[i] - radius - spec.lower) / spec.voxel_size - 0.5).astype(np.int64)
            hi = np.floor((means[i] + radius - spec.lower) / spec.voxel_size - 0.5).astype(np.int64)
            lo, hi = np.maximum(lo, 0), np.minimum(hi, dims - 1)
            if np.any(hi < lo):
                continue
            ranges = [np.arange(lo[a], hi[a] + 1) for a in range(3)]
        flat = ((ranges[0][:, None, None] * dims[1] + ranges[1][None, :, None]) * dims[2]
                + ranges[2][None, None, :]).reshape(-1)
        voxel_parts.append(flat)
        gauss_parts.append(np.full(flat.size, i, dtype=np.int64))
    if not voxel_parts:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(gauss_parts), np.concatenate(voxel_parts)


def _tile_bounds(num_voxels: int, workers: int) -> List[Tuple[int, int]]:
    workers = max(1, min(workers, num_voxels))
    edges = np.linspace(0, num_voxels, workers + 1).astype(np.int64)
    return [(int(edges[t]), int(edges[t + 1])) for t in range(workers)]


def _tiled_bincount(voxel: np.ndarray, weights: List[np.ndarray], num_voxels: int,
                    workers: int) -> List[np.ndarray]:
    """
    Per-voxel sums of several weight arrays over disjoint voxel tiles.

    Each tile sums its pairs in their original order, so the result does not
    depend on the worker count.
    """
    def tile_sums(bounds):
        start, stop = bounds
        mask = (voxel >= start) & (voxel < stop)
        local = voxel[mask] - start
        return [np.bincount(local, weights=w[mask], minlength=stop - start) for w in weights]

    tiles = _tile_bounds(num_voxels, workers)
    if len(tiles) == 1:
        results = [tile_sums(tiles[0])]
    else:
        with ThreadPoolExecutor(max_workers=len(tiles)) as pool:
            results = list(pool.map(tile_sums, tiles))
    return [np.concatenate([r[k] for r in results]) for k in range(len(weights))]


def splat_forward(means: np.ndarray, scales: np.ndarray, quats: np.ndarray,
                  opacities: np.ndarray, logits: np.ndarray, spec: GridSpec,
                  cull_kappa: float = 3.0, workers: int = 1) -> SplatContext:
    """
    Probabilistic superposition of Gaussians at voxel centres.

    alpha_i(x) = a_i exp(-0.5 (x - m_i)^T Sigma_i^-1 (x - m_i))
    o(x) = 1 - prod_i (1 - alpha_i(x)), accumulated as a sum of logs
    c(x) = sum_i alpha_i softmax(c_i) / sum_i alpha_i (uniform where the sum is 0)
    """
    if not (cull_kappa > 0):
        raise ValueError(f"cull_kappa must be positive or inf, got {cull_kappa}")
    count, num_classes = logits.shape
    gauss, voxel = _contributing_pairs(means, scales, spec, cull_kappa)

    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    if np.any(norms < 1e-12):
        raise ValueError("near-zero quaternion cannot be normalized")
    unit = quats / norms
    rotation = quaternion_to_rotation(unit)
    shifted = logits - logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)

    offsets = spec.voxel_centers()[voxel] - means[gauss]
    local = np.einsum("pij,pi->pj", rotation[gauss], offsets) / scales[gauss]
    gaussian_term = np.exp(-0.5 * (local * local).sum(axis=1))
    alpha = opacities[gauss] * gaussian_term

    with np.errstate(divide="ignore"):
        log_keep = np.log1p(-alpha)
    weights = [log_keep, alpha] + [alpha * probs[gauss, c] for c in range(num_classes)]
    sums = _tiled_bincount(voxel, weights, spec.num_voxels, workers)
    log_transmit, alpha_sum = sums[0], sums[1]
    occupancy = -np.expm1(log_transmit)
    weighted = np.stack(sums[2:], axis=1)
    semantics = np.full((spec.num_voxels, num_classes), 1.0 / num_classes)
    covered = alpha_sum > 0
    semantics[covered] = weighted[covered] / alpha_sum[covered, None]

    return SplatContext(spec, count, gauss, voxel, offsets, local, unit, norms, rotation,
                        scales, opacities, gaussian_term, alpha, probs, log_transmit,
                        alpha_sum, occupancy, semantics)


def _gaussian_sums(index: np.ndarray, values: np.ndarray, count: int) -> np.ndarray:
    if values.ndim == 1:
        return np.bincount(index, weights=values, minlength=count)
    flat = values.reshape(values.shape[0], -1)
    sums = np.stack([np.bincount(index, weights=flat[:, k], minlength=count)
                     for k in range(flat.shape[1])], axis=1)
    return sums.reshape((count,) + values.shape[1:])


def splat_backward(ctx: SplatContext, grad_occupancy: np.ndarray,
                   grad_semantics: np.ndarray) -> dict:
    """
    Analytic gradients of occupancy and semantics w.r.t. primitive parameters.

    Args:
        ctx: Context from splat_forward
        grad_occupancy: (V,) upstream gradient of o(x)
        grad_semantics: (V, C) upstream gradient of c(x)

    Returns:
        dict with gradients for means, scales, rotations (w.r.t. the raw,
        un-normalized quaternion), opacities and logits
    """
    g, v = ctx.gauss, ctx.voxel
    alpha = ctx.alpha
    num_voxels = ctx.spec.num_voxels
    saturated = alpha >= 1.0
    with np.errstate(divide="ignore"):
        log_keep = np.where(saturated, 0.0, np.log1p(-alpha))
    # prod_{j != i} (1 - alpha_j). A voxel holding an alpha of exactly 1 has a
    # log-space total of -inf, so there the product is formed from the other pairs
    saturated_count = np.bincount(v, weights=saturated.astype(np.float64),
                                  minlength=num_voxels)[v]
    log_rest = np.bincount(v, weights=log_keep, minlength=num_voxels)[v]
    others = np.where(saturated_count == 0,
                      np.exp(ctx.log_transmit[v] - log_keep),
                      np.where(saturated & (saturated_count == 1), np.exp(log_rest), 0.0))
    grad_alpha = grad_occupancy[v] * others

    covered = ctx.alpha_sum[v] > 0
    inv_sum = np.where(covered, 1.0 / np.where(covered, ctx.alpha_sum[v], 1.0), 0.0)
    sem_up = grad_semantics[v]
    pair_probs = ctx.probs[g]
    grad_alpha += ((sem_up * (pair_probs - ctx.semantics[v])).sum(axis=1)) * inv_sum
    grad_probs = _gaussian_sums(g, (alpha * inv_sum)[:, None] * sem_up, ctx.count)
    grad_logits = ctx.probs * (grad_probs - (grad_probs * ctx.probs).sum(axis=1, keepdims=True))

    grad_opacities = _gaussian_sums(g, grad_alpha * ctx.gaussian_term, ctx.count)
    grad_q = -0.5 * alpha * grad_alpha
    pair_scales = ctx.scales[g]
    grad_scales = _gaussian_sums(g, grad_q[:, None] * (-2.0 * ctx.local ** 2 / pair_scales),
                                 ctx.count)
    grad_local = grad_q[:, None] * 2.0 * ctx.local / pair_scales
    grad_offsets = np.einsum("pij,pj->pi", ctx.rotation[g], grad_local)
    grad_means = -_gaussian_sums(g, grad_offsets, ctx.count)

    grad_rotation = _gaussian_sums(g, ctx.offsets[:, :, None] * grad_local[:, None, :], ctx.count)
    grad_unit = np.einsum("jkab,jab->jk", _rotation_jacobian(ctx.quats), grad_rotation)
    radial = (grad_unit * ctx.quats).sum(axis=1, keepdims=True)
    grad_quats = (grad_unit - ctx.quats * radial) / ctx.norms

    return {"means": grad_means, "scales": grad_scales, "rotations": grad_quats,
            "opacities": grad_opacities, "logits": grad_logits}


def splat_tensors(means: Tensor, scales: Tensor, rotations: Tensor, opacities: Tensor,
                  logits: Tensor, spec: GridSpec, cull_kappa: float = 3.0,
                  workers: int = 1) -> Tensor:
    """
    Tape-recorded splatting.

    Returns:
        (V, 1 + C) field: column 0 is occupancy, columns 1.. the class
        distribution, voxels in row-major order
    """
    ctx = splat_forward(means.data, scales.data, rotations.data, opacities.data, logits.data,
                        spec, cull_kappa, workers)
    out = np.concatenate([ctx.occupancy[:, None], ctx.semantics], axis=1)

    def vjp(grad):
        grads = splat_backward(ctx, grad[:, 0], grad[:, 1:])
        return (grads["means"], grads["scales"], grads["rotations"], grads["opacities"],
                grads["logits"])

    return tc.apply_op("splat", (means, scales, rotations, opacities, logits), out, vjp)


def splat(gaussians: GaussianSet, spec: GridSpec, cull_kappa: float = 3.0,
          workers: int = 1) -> VoxelGrid:
    """Splat a GaussianSet into a probabilistic VoxelGrid."""
    ctx = splat_forward(gaussians.means, gaussians.scales, gaussians.rotations,
                        gaussians.opacities, gaussians.logits, spec, cull_kappa, workers)
    return VoxelGrid(spec, gaussians.num_classes,
                     occupancy=ctx.occupancy.reshape(spec.dims),
                     semantics=ctx.semantics.reshape(tuple(spec.dims) + (gaussians.num_classes,)))


def splat_oracle(gaussians: GaussianSet, spec: GridSpec) -> VoxelGrid:
    """Brute-force splatting: loop over every voxel, no culling."""
    if gaussians.count > ORACLE_MAX_GAUSSIANS or spec.num_voxels > ORACLE_MAX_VOXELS:
        raise ValueError(f"oracle limited to {ORACLE_MAX_GAUSSIANS} Gaussians and "
                         f"{ORACLE_MAX_VOXELS} voxels, got {gaussians.count} and {spec.num_voxels}")
    num_classes = gaussians.num_classes
    occupancy = np.zeros(spec.dims)
    semantics = np.full(tuple(spec.dims) + (num_classes,), 1.0 / num_classes)
    if gaussians.count == 0:
        return VoxelGrid(spec, num_classes, occupancy=occupancy, semantics=semantics)

    precision = np.linalg.inv(covariance_from(gaussians.scales, gaussians.rotations))
    opacities = gaussians.opacities
    shifted = gaussians.logits - gaussians.logits.max(axis=1, keepdims=True)
    probs = np.exp(shifted) / np.exp(shifted).sum(axis=1, keepdims=True)
    xs, ys, zs = (spec.axis_centers(a) for a in range(3))
    for ix, x in enumerate(xs):
        for iy, y in enumerate(ys):
            for iz, z in enumerate(zs):
                d = np.array([x, y, z]) - gaussians.means
                q = np.einsum("ji,jik,jk->j", d, precision, d)
                alpha = opacities * np.exp(-0.5 * q)
                occupancy[ix, iy, iz] = 1.0 - np.prod(1.0 - alpha)
                total = alpha.sum()
                if total > 0:
                    semantics[ix, iy, iz] = (alpha[:, None] * probs).sum(axis=0) / total
    return VoxelGrid(spec, num_classes, occupancy=occupancy, semantics=semantics)


def culling_error_bound(opacities: np.ndarray, cull_kappa: float) -> float:
    """Upper bound on occupancy lost to culling at any voxel."""
    return float(1.0 - np.prod(1.0 - opacities * np.exp(-0.5 * cull_kappa ** 2)))


def labels_from(grid: VoxelGrid, occ_threshold: float = 0.5) -> VoxelGrid:
    """Label = argmax class where occupancy > threshold, else empty; ties go low."""
    if not 0.0 < occ_threshold < 1.0:
        raise ValueError(f"occupancy threshold must be in (0, 1), got {occ_threshold}")
    labels = np.argmax(grid.semantics, axis=-1).astype(np.int64)
    labels[grid.occupancy <= occ_threshold] = grid.num_classes
    return VoxelGrid(grid.spec, grid.num_classes, labels=labels)


def semantic_distribution(field: Tensor) -> Tensor:
    """(V, 1 + C) splat field -> (V, C + 1) distribution, empty last: [o * c, 1 - o]."""
    occupancy = field[:, 0:1]
    classes = tc.mul(occupancy, field[:, 1:])
    return tc.concat([classes, tc.sub(1.0, occupancy)], axis=1)


# ---------------------------------------------------------------------------
# Decoder
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DecoderConfig:
    """View-guided refinement settings."""
    blocks: int = 2
    hidden: int = 64
    max_offset: float = 1.0
    max_log_scale: float = 0.5
    scale_min_factor: float = 0.1
    near: float = 0.1

    def __post_init__(self):
        if self.blocks < 1:
            raise ValueError(f"decoder needs at least one block, got {self.blocks}")


def _embedding_width(num_classes: int) -> int:
    return 3 + 3 + 4 + 1 + num_classes


def init_decoder_params(cfg: DecoderConfig, feature_dim: int, num_classes: int,
                        seed: int) -> dict:
    """Delta-head weights per block; the output layer starts at zero."""
    rng = np.random.default_rng([seed, 7])
    fan_in = feature_dim + _embedding_width(num_classes)
    out_width = _embedding_width(num_classes)
    params = {}
    for block in range(cfg.blocks):
        prefix = f"decoder.b{block}"
        params[f"{prefix}.w1"] = Tensor(rng.standard_normal((fan_in, cfg.hidden)) / np.sqrt(fan_in),
                                        requires_grad=True, name=f"{prefix}.w1")
        params[f"{prefix}.b1"] = Tensor(np.zeros(cfg.hidden), requires_grad=True, name=f"{prefix}.b1")
        params[f"{prefix}.w2"] = Tensor(np.zeros((cfg.hidden, out_width)), requires_grad=True,
                                        name=f"{prefix}.w2")
        params[f"{prefix}.b2"] = Tensor(np.zeros(out_width), requires_grad=True, name=f"{prefix}.b2")
    return params


def sample_views(means: Tensor, pyramids: Sequence, rig: CameraRig, near: float) -> Tensor:
    """
    Average pyramid features at each mean's projection over visible views
    and all levels. Means visible in no view get the zero feature.
    """
    count = means.shape[0]
    img_h, img_w = rig.image_size
    total = None
    hits = np.zeros(count)
    for view, pyramid in enumerate(pyramids):
        fx, fy, cx, cy = rig.intrinsics[view]
        cam = tc.add(tc.matmul(means, Tensor(rig.rotations[view].T)), Tensor(rig.translations[view]))
        depth = cam.data[:, 2]
        safe_depth = np.where(depth > near, depth, 1.0)
        px = fx * cam.data[:, 0] / safe_depth + cx
        py = fy * cam.data[:, 1] / safe_depth + cy
        visible = (depth > near) & (px >= 0) & (px < img_w) & (py >= 0) & (py < img_h)
        mask = visible.astype(np.float64)

        z = tc.add(tc.mul(cam[:, 2], mask), 1.0 - mask)
        u = tc.div(tc.add(tc.mul(tc.div(cam[:, 0], z), fx), cx), float(img_w))
        v = tc.div(tc.add(tc.mul(tc.div(cam[:, 1], z), fy), cy), float(img_h))
        uv = tc.stack([tc.clip(u, 0.0, 1.0), tc.clip(v, 0.0, 1.0)], axis=1)
        for level in pyramid.levels:
            sampled = tc.mul(tc.bilinear_sample(level, uv), mask[:, None])
            total = sampled if total is None else tc.add(total, sampled)
        hits += mask * len(pyramid.levels)
    return tc.div(total, np.maximum(hits, 1.0)[:, None])


def decode_gaussians(pyramids: Sequence, rig: CameraRig,
                     init: Union[GaussianSet, GaussianTensors], cfg: DecoderConfig,
                     params: dict, spec: GridSpec) -> GaussianTensors:
    """
    Refine Gaussians over cfg.blocks blocks of projection, multi-level
    bilinear sampling, and an MLP delta head.

    Each block maps [pooled feature, parameter embedding] to
    (dm, dlog_s, dr, da_logit, dc); means are clamped to the grid volume,
    scales to s_min, and quaternions renormalized.

    Returns:
        GaussianTensors; call .to_set() for plain arrays
    """
    if len(pyramids) != rig.views:
        raise ValueError(f"got {len(pyramids)} pyramids for a {rig.views}-view rig")
    state = init.as_tensors() if isinstance(init, GaussianSet) else init
    means, scales, quats = state.means, state.scales, state.rotations
    opacity_logits, logits = state.opacity_logits, state.logits
    num_classes = logits.shape[1]
    s_min = cfg.scale_min_factor * spec.voxel_size
    half_extent = 0.5 * (spec.upper - spec.lower)

    for block in range(cfg.blocks):
        prefix = f"decoder.b{block}"
        pooled = sample_views(means, pyramids, rig, cfg.near)
        embedding = tc.concat([
            tc.div(tc.sub(means, spec.center), half_extent),
            tc.log(scales),
            quats,
            tc.reshape(opacity_logits, (-1, 1)),
            logits,
        ], axis=1)
        hidden = tc.gelu(tc.linear(tc.concat([pooled, embedding], axis=1),
                                   params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
        delta = tc.linear(hidden, params[f"{prefix}.w2"], params[f"{prefix}.b2"])

        means = tc.clip(tc.add(means, tc.mul(tc.tanh(delta[:, 0:3]), cfg.max_offset)),
                        spec.lower, spec.upper)
        scales = tc.clip(tc.mul(scales, tc.exp(tc.mul(tc.tanh(delta[:, 3:6]), cfg.max_log_scale))),
                         lo=s_min)
        quats = tc.add(quats, delta[:, 6:10])
        quats = tc.div(quats, tc.sqrt(tc.sum(tc.mul(quats, quats), axis=1, keepdims=True)))
        opacity_logits = tc.add(opacity_logits, delta[:, 10])
        logits = tc.add(logits, delta[:, 11:11 + num_classes])

    return GaussianTensors(means, scales, quats, opacity_logits, logits)
