"""
Test the losses, confusion accounting and metric reports
"""

import math

import numpy as np
import pytest

from src import tensor_core as tc
from src.gaussian_scene import GridSpec, VoxelGrid
from src.objective_metrics import (ConfusionMatrix, LossConfig, accumulate, cross_entropy,
                                   loss_terms, lovasz_per_class, lovasz_softmax, metrics_report,
                                   miou, per_class_iou, per_class_table, sc_iou)

CLASS_NAMES = ("ground", "vehicle")


def _grid(labels, num_classes=2):
    labels = np.asarray(labels).reshape(-1, 1, 1)
    return VoxelGrid(GridSpec((labels.shape[0], 1, 1), (0.0, 0.0, 0.0), 1.0), num_classes,
                     labels=labels)


def test_cross_entropy_of_perfect_and_uniform_predictions():
    gt = np.array([0, 1, 2, 2])
    perfect = tc.Tensor(np.eye(3)[gt])
    assert float(cross_entropy(perfect, gt).data) == 0.0

    uniform = tc.Tensor(np.full((4, 3), 1.0 / 3.0))
    assert float(cross_entropy(uniform, gt).data) == pytest.approx(math.log(3.0))


def test_cross_entropy_clamps_zero_probability():
    pred = tc.Tensor(np.array([[0.0, 1.0]]))
    assert float(cross_entropy(pred, np.array([0])).data) == pytest.approx(-math.log(1e-12))


def test_cross_entropy_class_weights():
    gt = np.array([0, 1])
    pred = tc.Tensor(np.array([[0.5, 0.5], [0.25, 0.75]]))
    cfg = LossConfig(class_weights=(1.0, 3.0))
    expected = (math.log(2.0) + 3.0 * -math.log(0.75)) / 4.0
    assert float(cross_entropy(pred, gt, cfg).data) == pytest.approx(expected)


def test_lovasz_of_perfect_prediction_is_zero():
    gt = np.array([0, 1, 1, 2])
    assert float(lovasz_softmax(tc.Tensor(np.eye(3)[gt]), gt).data) == 0.0


@pytest.mark.parametrize("seed", range(10))
def test_lovasz_equals_jaccard_loss_on_hypercube_vertices(seed):
    rng = np.random.default_rng(seed)
    gt = rng.integers(0, 4, size=30)
    pred = rng.integers(0, 4, size=30)
    for c, loss in lovasz_per_class(np.eye(4)[pred], gt).items():
        inter = np.sum((gt == c) & (pred == c))
        union = np.sum((gt == c) | (pred == c))
        assert loss == pytest.approx(1.0 - inter / union, abs=1e-9)


def test_lovasz_averages_only_present_classes():
    gt = np.array([0, 0, 1])
    probs = np.array([[0.8, 0.1, 0.1], [0.6, 0.3, 0.1], [0.2, 0.7, 0.1]])
    per_class = lovasz_per_class(probs, gt)
    assert set(per_class) == {0, 1}
    value = float(lovasz_softmax(tc.Tensor(probs), gt).data)
    assert value == pytest.approx(np.mean(list(per_class.values())))


def test_zero_weight_term_is_skipped():
    gt = np.array([0, 1])
    pred = tc.Tensor(np.array([[0.9, 0.1], [0.2, 0.8]]))
    terms = loss_terms(pred, gt, LossConfig(ce_weight=0.0, lovasz_weight=2.0))
    assert "ce" not in terms
    assert float(terms["total"].data) == pytest.approx(2.0 * float(terms["lovasz"].data))


def test_loss_config_validation():
    with pytest.raises(ValueError):
        LossConfig(ce_weight=0.0, lovasz_weight=0.0)
    with pytest.raises(ValueError):
        LossConfig(ce_weight=-1.0)


def test_loss_rejects_labels_out_of_range():
    with pytest.raises(ValueError):
        cross_entropy(tc.Tensor(np.full((2, 3), 1.0 / 3.0)), np.array([0, 3]))


def test_iou_arithmetic_from_counts():
    counts = np.zeros((3, 3), dtype=np.int64)
    counts[0, 0] = 3
    counts[2, 0] = 1
    counts[0, 2] = 2
    cm = ConfusionMatrix(2, counts)
    ious = per_class_iou(cm)
    assert ious[0] == 0.5
    assert np.isnan(ious[1])
    assert miou(cm) == 0.5


def test_perfect_self_evaluation_scores_one():
    gt = _grid([0, 1, 2, 2, 0, 1])
    cm = accumulate(ConfusionMatrix(2), gt, gt)
    assert sc_iou(cm) == (1.0, True)
    assert miou(cm) == 1.0


def test_all_empty_grids_leave_sc_iou_undefined():
    empty = _grid([2, 2, 2])
    geometry, defined = sc_iou(accumulate(ConfusionMatrix(2), empty, empty))
    assert geometry == 0.0 and not defined


def test_sc_iou_merges_classes():
    gt = _grid([0, 1, 2, 2])
    pred = _grid([1, 0, 0, 2])
    geometry, defined = sc_iou(accumulate(ConfusionMatrix(2), pred, gt))
    assert defined and geometry == pytest.approx(2.0 / 3.0)


def test_accumulation_is_independent_of_worker_count():
    rng = np.random.default_rng(4)
    pred = _grid(rng.integers(0, 3, size=101))
    gt = _grid(rng.integers(0, 3, size=101))
    matrices = [accumulate(ConfusionMatrix(2), pred, gt, workers=n).counts for n in (1, 2, 7)]
    for other in matrices[1:]:
        np.testing.assert_array_equal(matrices[0], other)
    assert matrices[0].sum() == 101


def test_accumulate_adds_to_existing_counts_and_merges():
    gt = _grid([0, 1, 2])
    once = accumulate(ConfusionMatrix(2), gt, gt)
    twice = accumulate(once, gt, gt)
    assert twice.total == 6
    np.testing.assert_array_equal(once.merge(once).counts, twice.counts)
    with pytest.raises(ValueError):
        once.merge(ConfusionMatrix(3))


def test_accumulate_rejects_mismatched_grids():
    with pytest.raises(ValueError):
        accumulate(ConfusionMatrix(2), _grid([0, 1]), _grid([0, 1, 2]))
    with pytest.raises(ValueError):
        accumulate(ConfusionMatrix(2), _grid([0, 5]), _grid([0, 1]))


def test_per_class_table_columns():
    gt = _grid([0, 1, 2, 0])
    pred = _grid([0, 0, 2, 2])
    table = per_class_table(accumulate(ConfusionMatrix(2), pred, gt), CLASS_NAMES)
    assert list(table.columns) == ["Class", "TP", "FP", "FN", "IoU"]
    assert list(table["Class"]) == list(CLASS_NAMES)
    assert table.loc[0, "TP"] == 1 and table.loc[0, "FP"] == 1 and table.loc[0, "FN"] == 1
    assert table.loc[1, "IoU"] == 0.0


def test_report_is_deterministic_and_machine_readable():
    rng = np.random.default_rng(9)
    pred = _grid(rng.integers(0, 3, size=50))
    gt = _grid(rng.integers(0, 3, size=50))
    cm = accumulate(ConfusionMatrix(2), pred, gt)
    report = metrics_report(cm, CLASS_NAMES)
    assert report == metrics_report(accumulate(ConfusionMatrix(2), pred, gt, workers=3),
                                    CLASS_NAMES)

    block = report.split("[metrics]\n", 1)[1]
    values = dict(line.split(" = ") for line in block.strip().splitlines())
    assert set(values) == {"voxels", "sc_iou", "sc_iou_defined", "miou", "iou.ground",
                           "iou.vehicle"}
    assert int(values["voxels"]) == 50
    assert float(values["miou"]) == pytest.approx(miou(cm), abs=1e-10)


def test_report_marks_absent_class():
    gt = _grid([0, 2, 2])
    report = metrics_report(accumulate(ConfusionMatrix(2), gt, gt), CLASS_NAMES)
    assert "iou.vehicle = nan" in report
    assert "n/a" in report
