"""
Training Objective and Occupancy Metrics

Handles:
- Cross-entropy and Lovasz-Softmax losses on per-voxel distributions
- Their weighted combination (lambda * CE + beta * Lovasz)
- Confusion-matrix accounting, SC IoU, SSC mIoU and per-class IoU
- Text / key=value metric reports and a pandas per-class table
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from src import tensor_core as tc
from src.gaussian_scene import VoxelGrid
from src.tensor_core import Tensor

PROB_EPS = 1e-12


@dataclass(frozen=True)
class LossConfig:
    """Loss weights. Distributions carry the empty class in the last column."""
    ce_weight: float = 1.0
    lovasz_weight: float = 1.0
    class_weights: Optional[Tuple[float, ...]] = None

    def __post_init__(self):
        if self.ce_weight < 0 or self.lovasz_weight < 0:
            raise ValueError("loss weights must be non-negative")
        if self.ce_weight == 0 and self.lovasz_weight == 0:
            raise ValueError("ce_weight and lovasz_weight cannot both be zero")


def _check_inputs(pred: Tensor, gt: np.ndarray) -> np.ndarray:
    gt = np.asarray(gt, dtype=np.int64).reshape(-1)
    if pred.ndim != 2 or pred.shape[0] != gt.size:
        raise ValueError(f"prediction {pred.shape} does not match {gt.size} labels")
    if gt.size and (gt.min() < 0 or gt.max() >= pred.shape[1]):
        raise ValueError(f"labels must lie in [0, {pred.shape[1]})")
    return gt


def cross_entropy(pred: Tensor, gt: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    """Mean of -log p(gt) over voxels, with p clamped at 1e-12; empty is a class."""
    gt = _check_inputs(pred, gt)
    picked = tc.clip(pred[np.arange(gt.size), gt], lo=PROB_EPS)
    nll = tc.neg(tc.log(picked))
    if cfg.class_weights is None:
        return tc.mean(nll)
    weights = np.asarray(cfg.class_weights, dtype=np.float64)[gt]
    return tc.div(tc.sum(tc.mul(nll, weights)), float(weights.sum()))


def lovasz_grad(gt_sorted: np.ndarray) -> np.ndarray:
    """Gradient of the Lovasz extension of the Jaccard loss w.r.t. sorted errors."""
    gts = gt_sorted.sum()
    intersection = gts - np.cumsum(gt_sorted)
    union = gts + np.cumsum(1.0 - gt_sorted)
    jaccard = 1.0 - intersection / union
    if gt_sorted.size > 1:
        jaccard[1:] = jaccard[1:] - jaccard[:-1]
    return jaccard


def lovasz_per_class(probs: np.ndarray, gt: np.ndarray) -> Dict[int, float]:
    """Lovasz-Softmax loss of every class present in gt."""
    losses = {}
    for c in range(probs.shape[1]):
        fg = (gt == c).astype(np.float64)
        if fg.sum() == 0:
            continue
        errors = np.abs(fg - probs[:, c])
        order = np.argsort(-errors, kind="stable")
        losses[c] = float(np.dot(errors[order], lovasz_grad(fg[order])))
    return losses


def lovasz_softmax(pred: Tensor, gt: np.ndarray) -> Tensor:
    """
    Lovasz-Softmax averaged over classes present in gt.

    Per class, errors |1[gt = c] - p_c| are sorted in decreasing order and
    weighted by the discrete Jaccard-loss increments of the sorted
    ground-truth indicator.
    """
    gt = _check_inputs(pred, gt)
    probs = pred.data
    present = [c for c in range(probs.shape[1]) if np.any(gt == c)]
    if not present:
        return tc.apply_op("lovasz_softmax", (pred,), np.zeros(()),
                           lambda g: (np.zeros_like(probs),))

    grad = np.zeros_like(probs)
    total = 0.0
    for c in present:
        fg = (gt == c).astype(np.float64)
        errors = np.abs(fg - probs[:, c])
        order = np.argsort(-errors, kind="stable")
        weights = lovasz_grad(fg[order])
        total += float(np.dot(errors[order], weights))
        sign = np.where(fg > 0, -1.0, 1.0)
        grad[order, c] = weights * sign[order]
    grad /= len(present)
    value = np.asarray(total / len(present))
    return tc.apply_op("lovasz_softmax", (pred,), value, lambda g: (g * grad,))


def loss_terms(pred: Tensor, gt: np.ndarray, cfg: LossConfig = LossConfig()) -> Dict[str, Tensor]:
    """Components and total of lambda * CE + beta * Lovasz; zero-weight terms are skipped."""
    terms = {}
    parts = []
    if cfg.ce_weight > 0:
        terms["ce"] = cross_entropy(pred, gt, cfg)
        parts.append(tc.mul(terms["ce"], cfg.ce_weight))
    if cfg.lovasz_weight > 0:
        terms["lovasz"] = lovasz_softmax(pred, gt)
        parts.append(tc.mul(terms["lovasz"], cfg.lovasz_weight))
    total = parts[0]
    for part in parts[1:]:
        total = tc.add(total, part)
    terms["total"] = total
    return terms


def total_loss(pred: Tensor, gt: np.ndarray, cfg: LossConfig = LossConfig()) -> Tensor:
    return loss_terms(pred, gt, cfg)["total"]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class ConfusionMatrix:
    """(C+1)^2 counts, rows = ground truth, columns = prediction, empty last."""
    num_classes: int
    counts: Optional[np.ndarray] = None

    def __post_init__(self):
        size = self.num_classes + 1
        if self.counts is None:
            self.counts = np.zeros((size, size), dtype=np.int64)
        if self.counts.shape != (size, size) or np.any(self.counts < 0):
            raise ValueError(f"confusion counts must be a non-negative {size}x{size} array")

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise ValueError("cannot merge confusion matrices of different class counts")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, pred: VoxelGrid, gt: VoxelGrid,
               workers: int = 1) -> ConfusionMatrix:
    """Add one grid pair to the counts; shards are counted separately and summed."""
    if pred.labels.shape != gt.labels.shape:
        raise ValueError(f"grid dims differ: prediction {pred.labels.shape}, gt {gt.labels.shape}")
    size = cm.num_classes + 1
    gt_labels = gt.labels.reshape(-1).astype(np.int64)
    pred_labels = pred.labels.reshape(-1).astype(np.int64)
    if gt_labels.size and (min(gt_labels.min(), pred_labels.min()) < 0
                           or max(gt_labels.max(), pred_labels.max()) >= size):
        raise ValueError(f"labels out of range for {cm.num_classes} classes")
    codes = gt_labels * size + pred_labels

    def count(shard):
        return np.bincount(shard, minlength=size * size)

    shards = np.array_split(codes, max(1, workers))
    if len(shards) == 1:
        counts = count(shards[0])
    else:
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            counts = np.sum(list(pool.map(count, shards)), axis=0)
    return cm.merge(ConfusionMatrix(cm.num_classes, counts.reshape(size, size)))


def per_class_iou(cm: ConfusionMatrix) -> np.ndarray:
    """IoU per occupied class; NaN where TP + FP + FN = 0."""
    counts = cm.counts[:cm.num_classes, :cm.num_classes + 1]
    tp = np.diag(cm.counts)[:cm.num_classes].astype(np.float64)
    fp = cm.counts[:, :cm.num_classes].sum(axis=0) - tp
    fn = counts.sum(axis=1) - tp
    union = tp + fp + fn
    return np.where(union > 0, tp / np.where(union > 0, union, 1.0), np.nan)


def miou(cm: ConfusionMatrix) -> float:
    """Mean IoU over occupied classes with a non-zero union."""
    ious = per_class_iou(cm)
    valid = ~np.isnan(ious)
    return float(ious[valid].mean()) if np.any(valid) else 0.0


def sc_iou(cm: ConfusionMatrix) -> Tuple[float, bool]:
    """
    Geometry IoU with every non-empty class merged into one.

    Returns:
        (iou, defined); all-empty prediction and ground truth give (0.0, False)
    """
    empty = cm.num_classes
    occupied_gt = cm.counts[:empty, :].sum()
    occupied_pred = cm.counts[:, :empty].sum()
    tp = cm.counts[:empty, :empty].sum()
    union = occupied_gt + occupied_pred - tp
    if union == 0:
        return 0.0, False
    return float(tp / union), True


def per_class_table(cm: ConfusionMatrix, class_names: Sequence[str]) -> pd.DataFrame:
    """One row per occupied class: name, TP, FP, FN, IoU."""
    tp = np.diag(cm.counts)[:cm.num_classes]
    fp = cm.counts[:, :cm.num_classes].sum(axis=0) - tp
    fn = cm.counts[:cm.num_classes, :].sum(axis=1) - tp
    return pd.DataFrame({
        "Class": list(class_names)[:cm.num_classes],
        "TP": tp,
        "FP": fp,
        "FN": fn,
        "IoU": per_class_iou(cm),
    })


def metrics_report(cm: ConfusionMatrix, class_names: Sequence[str]) -> str:
    """Flat text report followed by a machine-readable key = value block."""
    geometry, defined = sc_iou(cm)
    mean_iou = miou(cm)
    table = per_class_table(cm, class_names)

    lines = [
        "OCCUPANCY EVALUATION REPORT",
        "=" * 60,
        f"Voxels evaluated: {cm.total}",
        f"SC IoU:   {geometry:.4f}" + ("" if defined else "  (undefined: no occupancy)"),
        f"SSC mIoU: {mean_iou:.4f}",
        "",
        "Per-class IoU:",
    ]
    for row in table.itertuples(index=False):
        iou = "n/a" if np.isnan(row.IoU) else f"{row.IoU:.4f}"
        lines.append(f"  {row.Class:15} {iou:>8}  (TP={row.TP}, FP={row.FP}, FN={row.FN})")
    lines += [
        "",
        "[metrics]",
        f"voxels = {cm.total}",
        f"sc_iou = {geometry:.10f}",
        f"sc_iou_defined = {int(defined)}",
        f"miou = {mean_iou:.10f}",
    ]
    for row in table.itertuples(index=False):
        value = "nan" if np.isnan(row.IoU) else f"{row.IoU:.10f}"
        lines.append(f"iou.{row.Class} = {value}")
    return "\n".join(lines) + "\n"
