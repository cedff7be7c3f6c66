"""
Occupancy Pipeline Orchestration

This module wires the pipeline together: synthetic tokens -> adapter ->
Gaussian decoder -> splatting -> loss, the training loop with checkpoints,
and frozen-model evaluation with metric reports and Excel export.
"""

import os
import re
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
from dotenv import load_dotenv

from src import tensor_core as tc
from src.gaussian_scene import (GaussianTensors, VoxelGrid, decode_gaussians,
                                init_decoder_params, labels_from, lattice_init,
                                semantic_distribution, splat_tensors)
from src.hgfa import hgfa_forward, init_hgfa_params
from src.objective_metrics import (ConfusionMatrix, accumulate, loss_terms, metrics_report,
                                   per_class_table, miou, sc_iou)
from src.optim import Adam, lr_at
from src.run_config import ConfigError, RunConfig, config_values, derive_config
from src.scene_io import write_gaussian_file, write_voxel_file
from src.synthetic_scene import SyntheticScene, default_scene
from src.token_provider import CameraRig, TokenStack, generate_synthetic_tokens

# Load environment variables
load_dotenv()

# Initialize paths
PROJECT_ROOT = Path(__file__).parent.parent
OUTPUT_DIR = Path(os.getenv("VG3S_OUTPUT_DIR", PROJECT_ROOT / "output"))

CHECKPOINT_NAME = "checkpoint.npz"
LOG_NAME = "train_log.csv"
GAUSSIANS_NAME = "gaussians.vgs"
LOG_COLUMNS = ("step", "loss", "ce", "lovasz", "lr")


class CheckpointError(ValueError):
    """Raised when a checkpoint is unreadable or does not match the config."""


class NonFiniteLossError(ValueError):
    """Raised when a training step produces a non-finite value."""


@dataclass
class PipelineData:
    """Everything the loop consumes that is not a parameter."""
    scene: SyntheticScene
    rig: CameraRig
    tokens: TokenStack
    gt: VoxelGrid


@dataclass
class TrainResult:
    params: Dict[str, tc.Tensor]
    log: pd.DataFrame
    checkpoint_path: Path
    log_path: Path
    gaussians_path: Path


@dataclass
class EvalResult:
    report: str
    confusion: ConfusionMatrix
    prediction: VoxelGrid
    report_path: Optional[Path] = None


def resolve_output_dir(output_dir=None) -> Path:
    """Explicit directory, else VG3S_OUTPUT_DIR, else <project>/output."""
    if output_dir is not None:
        return Path(output_dir)
    return Path(os.getenv("VG3S_OUTPUT_DIR", OUTPUT_DIR))


def build_rig(cfg: RunConfig) -> CameraRig:
    return CameraRig.surround(cfg.tokens.views, center=cfg.grid.center[:2],
                              height=cfg.camera.height,
                              image_size=(cfg.camera.image_h, cfg.camera.image_w),
                              fov_deg=cfg.camera.fov_deg)


def prepare_data(cfg: RunConfig, scene: Optional[SyntheticScene] = None) -> PipelineData:
    """Rasterize the scene and synthesize its token stack; the bundled scene by default."""
    scene = scene if scene is not None else default_scene(cfg.grid)
    if scene.num_classes != cfg.scene.num_classes:
        raise ValueError(f"scene has {scene.num_classes} classes, "
                         f"config num_classes = {cfg.scene.num_classes}")
    if scene.grid != cfg.grid:
        raise ValueError(f"scene grid {scene.grid} differs from config grid {cfg.grid}")
    rig = build_rig(cfg)
    tokens = generate_synthetic_tokens(scene, rig, cfg.tokens, cfg.seed)
    return PipelineData(scene, rig, tokens, scene.rasterize())


def init_params(cfg: RunConfig) -> Dict[str, tc.Tensor]:
    """
    All learnable parameters by name: adapter, decoder heads, and the
    initial Gaussian properties (learnable queries). Scales are stored
    as logs so they stay positive under any update.
    """
    params = init_hgfa_params(cfg.hgfa, cfg.tokens.channels, cfg.seed)
    params.update(init_decoder_params(cfg.decoder, cfg.hgfa.target_dim,
                                      cfg.scene.num_classes, cfg.seed))
    anchors = lattice_init(cfg.grid, cfg.scene.num_gaussians, cfg.scene.num_classes, cfg.seed,
                           scale_factor=cfg.scene.init_scale_factor,
                           opacity=cfg.scene.init_opacity, jitter=cfg.scene.init_jitter)
    values = {
        "anchors.means": anchors.means,
        "anchors.log_scales": np.log(anchors.scales),
        "anchors.rotations": anchors.rotations,
        "anchors.opacity_logits": anchors.opacity_logits,
        "anchors.logits": anchors.logits,
    }
    for name, data in values.items():
        params[name] = tc.Tensor(data, requires_grad=True, name=name)
    return params


def anchor_tensors(params: Dict[str, tc.Tensor]) -> GaussianTensors:
    return GaussianTensors(params["anchors.means"], tc.exp(params["anchors.log_scales"]),
                           params["anchors.rotations"], params["anchors.opacity_logits"],
                           params["anchors.logits"])


def forward(cfg: RunConfig, data: PipelineData, params: Dict[str, tc.Tensor],
            training: bool = False, step: int = 0):
    """
    One pass of the pipeline.

    Returns:
        (GaussianTensors, field) where field is the (V, 1 + C) splat output
    """
    pyramids = hgfa_forward(data.tokens, cfg.hgfa, params, training=training,
                            seed=cfg.seed, step=step)
    gaussians = decode_gaussians(pyramids, data.rig, anchor_tensors(params), cfg.decoder,
                                 params, cfg.grid)
    field = splat_tensors(gaussians.means, gaussians.scales, gaussians.rotations,
                          tc.sigmoid(gaussians.opacity_logits), gaussians.logits,
                          cfg.grid, cfg.scene.cull_kappa, cfg.workers)
    return gaussians, field


def predict(cfg: RunConfig, data: PipelineData, params: Dict[str, tc.Tensor]):
    """Frozen forward pass; returns (GaussianSet, labelled VoxelGrid)."""
    gaussians, field = forward(cfg, data, params, training=False)
    spec = cfg.grid
    grid = VoxelGrid(spec, cfg.scene.num_classes,
                     occupancy=field.data[:, 0].reshape(spec.dims),
                     semantics=field.data[:, 1:].reshape(tuple(spec.dims) + (cfg.scene.num_classes,)))
    return gaussians.to_set(), labels_from(grid, cfg.scene.occ_threshold)


def _renormalize_anchors(params: Dict[str, tc.Tensor], cfg: RunConfig) -> None:
    rotations = params["anchors.rotations"]
    norms = np.linalg.norm(rotations.data, axis=1, keepdims=True)
    rotations.data = np.where(norms > 0, rotations.data / np.maximum(norms, 1e-300),
                              np.array([1.0, 0.0, 0.0, 0.0]))
    means = params["anchors.means"]
    means.data = np.clip(means.data, cfg.grid.lower, cfg.grid.upper)


def train_step(cfg: RunConfig, data: PipelineData, params: Dict[str, tc.Tensor],
               step: int) -> tuple:
    """
    Forward and backward for one step.

    Returns:
        (values dict of loss components, gradients by parameter name)

    Raises:
        NonFiniteLossError: naming the first op whose output went non-finite
    """
    gt = data.gt.labels.reshape(-1)
    try:
        with tc.GradTape() as tape:
            _, field = forward(cfg, data, params, training=True, step=step)
            terms = loss_terms(semantic_distribution(field), gt, cfg.loss)
    except tc.NonFiniteError as e:
        raise NonFiniteLossError(f"step {step}: {e}") from e

    total = terms["total"]
    if not np.isfinite(total.item()):
        record = tape.first_non_finite()
        culprit = f"op '{record.op}'" if record is not None else "the loss"
        raise NonFiniteLossError(f"step {step}: non-finite loss, first produced by {culprit}")

    names = list(params)
    grads = tc.backward(tape, total, [params[n] for n in names])
    by_name = {name: grads[params[name]] for name in names}
    for name, grad in by_name.items():
        if not np.all(np.isfinite(grad)):
            raise NonFiniteLossError(f"step {step}: non-finite gradient for {name}")
    values = {key: term.item() for key, term in terms.items()}
    return values, by_name


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, cfg: RunConfig, params: Dict[str, tc.Tensor], optimizer: Adam,
                    step: int, log: pd.DataFrame) -> None:
    arrays = {f"param.{name}": p.data for name, p in params.items()}
    arrays.update(optimizer.state_dict())
    for column in LOG_COLUMNS:
        arrays[f"log.{column}"] = log[column].to_numpy()
    arrays["meta.step"] = np.asarray(step, dtype=np.int64)
    arrays["meta.seed"] = np.asarray(cfg.seed, dtype=np.int64)
    arrays["meta.fingerprint"] = np.asarray(cfg.fingerprint())
    np.savez(path, **arrays)


def load_checkpoint(path, cfg: RunConfig) -> dict:
    """
    Read a checkpoint and check it against cfg.

    Raises:
        FileNotFoundError: If the path does not exist
        CheckpointError: Unreadable file, or parameters that do not match cfg
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as archive:
            arrays = {key: archive[key] for key in archive.files}
    except (OSError, ValueError, zipfile.BadZipFile) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e

    if "meta.fingerprint" not in arrays:
        raise CheckpointError(f"{path} is not a pipeline checkpoint")
    stored = str(arrays["meta.fingerprint"])
    if stored != cfg.fingerprint():
        raise CheckpointError(
            f"checkpoint {path.name} was written for a different configuration "
            f"(fingerprint {stored}, config {cfg.fingerprint()})")
    if "meta.seed" in arrays and int(arrays["meta.seed"]) != cfg.seed:
        print(f"Warning: checkpoint {path.name} was trained with seed {int(arrays['meta.seed'])}, "
              f"config seed is {cfg.seed}")

    expected = init_params(cfg)
    for name, param in expected.items():
        key = f"param.{name}"
        if key not in arrays:
            raise CheckpointError(f"checkpoint is missing parameter {name}")
        if arrays[key].shape != param.shape:
            raise CheckpointError(f"parameter {name}: checkpoint shape {arrays[key].shape}, "
                                  f"config shape {param.shape}")
    return arrays


def params_from_checkpoint(arrays: dict, cfg: RunConfig) -> Dict[str, tc.Tensor]:
    params = init_params(cfg)
    for name, param in params.items():
        param.data = np.array(arrays[f"param.{name}"], dtype=np.float64)
    return params


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

def train(cfg: RunConfig, output_dir=None, resume=None, stop_at: Optional[int] = None,
          scene: Optional[SyntheticScene] = None, excel: bool = False,
          verbose: bool = True) -> TrainResult:
    """
    Run the training loop and write checkpoint, log, and Gaussian set.

    Args:
        cfg: Validated run configuration
        output_dir: Where outputs go (default: resolve_output_dir())
        resume: Checkpoint to continue from
        stop_at: Stop after this many total steps (default: total_steps);
            the LR schedule always spans total_steps
        scene: Scene to fit (default: the bundled toy scene)
        excel: Also write the log as train_log.xlsx
        verbose: Print progress

    Returns:
        TrainResult
    """
    out = resolve_output_dir(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    stop = cfg.optim.total_steps if stop_at is None else min(stop_at, cfg.optim.total_steps)

    if verbose:
        print("=" * 80)
        print(f"TRAINING ({cfg.profile} profile, seed {cfg.seed})")
        print("=" * 80)
        print("Preparing synthetic scene and tokens...")
    data = prepare_data(cfg, scene)

    params = init_params(cfg)
    optimizer = Adam(params, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps)
    rows = {column: [] for column in LOG_COLUMNS}
    start = 0
    if resume is not None:
        arrays = load_checkpoint(resume, cfg)
        params = params_from_checkpoint(arrays, cfg)
        optimizer = Adam(params, cfg.optim.beta1, cfg.optim.beta2, cfg.optim.eps)
        optimizer.load_state_dict(arrays)
        start = int(arrays["meta.step"])
        rows = {column: list(arrays[f"log.{column}"]) for column in LOG_COLUMNS}
        if verbose:
            print(f"  - Resumed from {resume} at step {start}")

    if verbose:
        print(f"  - Parameters: {sum(p.size for p in params.values())} values "
              f"in {len(params)} tensors")
        print(f"  - Steps: {start} -> {stop} of {cfg.optim.total_steps}")

    for step in range(start, stop):
        lr = lr_at(step, cfg.optim)
        values, grads = train_step(cfg, data, params, step)
        optimizer.step(grads, lr)
        _renormalize_anchors(params, cfg)

        rows["step"].append(step)
        rows["loss"].append(values["total"])
        rows["ce"].append(values.get("ce", 0.0))
        rows["lovasz"].append(values.get("lovasz", 0.0))
        rows["lr"].append(lr)
        if verbose and (step % cfg.log_every == 0 or step == stop - 1):
            print(f"  - step {step:5d}  loss {values['total']:.6f}  "
                  f"ce {values.get('ce', 0.0):.6f}  lovasz {values.get('lovasz', 0.0):.6f}  "
                  f"lr {lr:.3e}")

    log = pd.DataFrame({
        "step": np.asarray(rows["step"], dtype=np.int64),
        **{column: np.asarray(rows[column], dtype=np.float64) for column in LOG_COLUMNS[1:]},
    })

    checkpoint_path = out / CHECKPOINT_NAME
    save_checkpoint(checkpoint_path, cfg, params, optimizer, stop, log)
    log_path = out / LOG_NAME
    log.to_csv(log_path, index=False)
    if excel:
        log.to_excel(out / "train_log.xlsx", index=False, engine="openpyxl",
                     sheet_name="Training Log")

    gaussians, _ = predict(cfg, data, params)
    gaussians_path = out / GAUSSIANS_NAME
    write_gaussian_file(gaussians, gaussians_path)

    if verbose:
        print(f"Checkpoint: {checkpoint_path}")
        print(f"Log: {log_path}")
        print(f"Gaussians: {gaussians_path}")
    return TrainResult(params, log, checkpoint_path, log_path, gaussians_path)


# ---------------------------------------------------------------------------
# Evaluation
# ---------------------------------------------------------------------------

def evaluate_grids(pred: VoxelGrid, gt: VoxelGrid, class_names, workers: int = 1) -> EvalResult:
    """Confusion matrix and report for one labelled prediction against ground truth."""
    if pred.num_classes != gt.num_classes:
        raise ValueError(f"prediction has {pred.num_classes} classes, gt has {gt.num_classes}")
    cm = accumulate(ConfusionMatrix(gt.num_classes), pred, gt, workers)
    return EvalResult(metrics_report(cm, class_names), cm, pred)


def export_metrics_excel(result: EvalResult, class_names, path) -> None:
    """Write summary, per-class IoU and confusion-matrix sheets."""
    geometry, defined = sc_iou(result.confusion)
    summary = pd.DataFrame([
        {"Metric": "SC IoU", "Value": geometry if defined else float("nan")},
        {"Metric": "SSC mIoU", "Value": miou(result.confusion)},
        {"Metric": "Voxels", "Value": result.confusion.total},
    ])
    labels = list(class_names)[:result.confusion.num_classes] + ["empty"]
    confusion = pd.DataFrame(result.confusion.counts, index=labels, columns=labels)
    with pd.ExcelWriter(path, engine="openpyxl") as writer:
        summary.to_excel(writer, index=False, sheet_name="Summary")
        per_class_table(result.confusion, class_names).to_excel(writer, index=False,
                                                                sheet_name="Per-Class IoU")
        confusion.to_excel(writer, sheet_name="Confusion")


def evaluate(cfg: RunConfig, checkpoint=None, scene: Optional[SyntheticScene] = None,
             output_dir=None, excel: bool = False, verbose: bool = True) -> EvalResult:
    """
    Run the frozen pipeline on a scene and score the thresholded labels.

    Args:
        cfg: Validated run configuration
        checkpoint: Trained checkpoint; None evaluates the untrained
            initialization
        scene: Scene to evaluate on (default: the bundled toy scene)
        output_dir: Where metrics.txt and prediction.vox go; None writes nothing
        excel: Also write metrics.xlsx
        verbose: Print the report

    Returns:
        EvalResult

    Raises:
        CheckpointError: checkpoint incompatible with cfg
    """
    if checkpoint is not None:
        params = params_from_checkpoint(load_checkpoint(checkpoint, cfg), cfg)
    else:
        params = init_params(cfg)
    data = prepare_data(cfg, scene)
    _, prediction = predict(cfg, data, params)
    result = evaluate_grids(prediction, data.gt, cfg.scene.class_names, cfg.workers)

    if output_dir is not None:
        out = Path(output_dir)
        out.mkdir(parents=True, exist_ok=True)
        result.report_path = out / "metrics.txt"
        result.report_path.write_text(result.report)
        write_voxel_file(prediction, out / "prediction.vox")
        if excel:
            export_metrics_excel(result, cfg.scene.class_names, out / "metrics.xlsx")
    if verbose:
        print(result.report, end="")
        if result.report_path is not None:
            print(f"Report: {result.report_path}")
    return result


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

FULL_ADAPTER = {"use_hgfa": True, "use_gatf": True, "use_tatr": True, "use_lsfp": True}
ABLATION_COMPONENTS = (
    ("full", {}),
    ("w/o HGFA", {"use_hgfa": False}),
    ("w/o GATF", {"use_gatf": False}),
    ("w/o TATR", {"use_tatr": False}),
    ("w/o LSFP", {"use_lsfp": False}),
)
ABLATION_COLUMNS = ("Study", "Variant", "HGFA", "GATF", "TATR", "LSFP", "K",
                    "IoU", "mIoU", "Final Loss")


def default_group_counts(layers: int) -> List[int]:
    return [k for k in range(1, 7) if layers % k == 0]


def grouping_overrides(cfg: RunConfig, groups: int) -> dict:
    """
    Flat overrides regrouping cfg's layers into `groups` groups.

    Per-level lists are picked from the configured levels, spread evenly
    from the first to the last; a single group keeps the level closest to
    tau = 1.
    """
    layers = cfg.tokens.layers
    if groups < 1 or layers % groups:
        raise ConfigError(f"{layers} layers cannot form {groups} groups")
    h = cfg.hgfa
    if groups == 1:
        picks = [int(np.argmin(np.abs(np.log2(h.scale_factors))))]
    else:
        picks = [int(round(j * (h.groups - 1) / (groups - 1))) for j in range(groups)]
    return {
        "groups": groups,
        "layers_per_group": layers // groups,
        "expansion_ratios": tuple(h.expansion_ratios[i] for i in picks),
        "pyramid_dims": tuple(h.pyramid_dims[i] for i in picks),
        "scale_factors": tuple(h.scale_factors[i] for i in picks),
    }


def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "_", name.lower().replace("/", "")).strip("_")


def run_ablation(cfg: RunConfig, output_dir=None, steps: Optional[int] = None,
                 group_counts: Optional[Sequence[int]] = None,
                 scene: Optional[SyntheticScene] = None, excel: bool = False,
                 verbose: bool = True) -> pd.DataFrame:
    """
    Train and score every adapter variant of cfg.

    Component study: the full adapter against the adapter-free DPT-style
    baseline and against single stages switched off. Grouping study: the full
    adapter at each group count K. Variants with identical settings are
    trained once.

    Args:
        cfg: Base configuration
        output_dir: Root for ablation.csv and one run directory per variant
        steps: Replaces total_steps for every variant
        group_counts: K values (default: divisors of the layer count up to 6)
        scene: Scene to fit (default: the bundled toy scene)
        excel: Also write ablation.xlsx, one sheet per study
        verbose: Print progress and the final table

    Returns:
        DataFrame with ABLATION_COLUMNS
    """
    out = resolve_output_dir(output_dir)
    out.mkdir(parents=True, exist_ok=True)
    base = {}
    if steps is not None:
        base = {"total_steps": steps, "warmup_steps": min(cfg.optim.warmup_steps, steps)}
    counts = default_group_counts(cfg.tokens.layers) if group_counts is None else list(group_counts)

    variants = [("components", name, {**base, **FULL_ADAPTER, **overrides})
                for name, overrides in ABLATION_COMPONENTS]
    variants += [("grouping", f"K={k}", {**base, **FULL_ADAPTER, **grouping_overrides(cfg, k)})
                 for k in counts]

    if verbose:
        print("=" * 80)
        print(f"ABLATIONS ({len(variants)} variants, seed {cfg.seed})")
        print("=" * 80)

    scores: Dict[str, dict] = {}
    rows = []
    for study, name, overrides in variants:
        variant = derive_config(cfg, overrides)
        key = repr(sorted(config_values(variant).items()))
        if key not in scores:
            if verbose:
                print(f"  - {study}: {name}")
            run_dir = out / _slug(name)
            trained = train(variant, run_dir, scene=scene, verbose=False)
            result = evaluate(variant, trained.checkpoint_path, scene=scene,
                              output_dir=run_dir, verbose=False)
            geometry, defined = sc_iou(result.confusion)
            scores[key] = {
                "IoU": geometry if defined else float("nan"),
                "mIoU": miou(result.confusion),
                "Final Loss": float(trained.log["loss"].iloc[-1]),
            }
        h = variant.hgfa
        rows.append({
            "Study": study,
            "Variant": name,
            "HGFA": h.use_hgfa,
            "GATF": h.use_hgfa and h.use_gatf,
            "TATR": h.use_hgfa and h.use_tatr,
            "LSFP": h.use_hgfa and h.use_lsfp,
            "K": h.groups,
            **scores[key],
        })

    table = pd.DataFrame(rows, columns=list(ABLATION_COLUMNS))
    table_path = out / "ablation.csv"
    table.to_csv(table_path, index=False)
    if excel:
        with pd.ExcelWriter(out / "ablation.xlsx", engine="openpyxl") as writer:
            for study, frame in table.groupby("Study", sort=False):
                frame.to_excel(writer, index=False, sheet_name=study.title())
    if verbose:
        print(table.to_string(index=False))
        print(f"Ablation table: {table_path}")
    return table
