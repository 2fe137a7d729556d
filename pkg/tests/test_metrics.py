import logging

import numpy as np
import pandas as pd
import pytest

from src.engine.errors import ConstantTruth, EmptyStructure, ShapeMismatch, ZeroMean, ZeroRange
from src.engine.metrics import (
    EVALUATION_COLUMNS,
    MetricReport,
    coefficient_of_variation,
    evaluate_split,
    label_range,
    log_reports,
    nrmse,
    r_squared,
    recon_accuracy,
    relative_voxel_difference,
    write_evaluation,
)
from src.engine.model import LabelScaler, Model, ModelConfig
from src.engine.voxel_core import VoxelGrid


def test_recon_accuracy_counts_matching_voxels():
    a = np.zeros((2, 2, 2))
    b = a.copy()
    b[0, 0, 0] = 1.0
    assert recon_accuracy(VoxelGrid(a), VoxelGrid(b)) == pytest.approx(0.875)
    assert recon_accuracy([a, a], [a, b]) == pytest.approx(1 - 1 / 16)
    with pytest.raises(ShapeMismatch):
        recon_accuracy(a, np.zeros((3, 3, 3)))


def test_r_squared():
    y = np.array([1.0, 2.0, 3.0, 4.0])
    assert r_squared(y, y) == 1.0
    assert r_squared(y, np.full(4, y.mean())) == pytest.approx(0.0)
    # constant offset c over variance: 1 - n c^2 / SST
    assert r_squared(y, y + 0.5) == pytest.approx(1 - 4 * 0.25 / 5.0)
    with pytest.raises(ConstantTruth):
        r_squared(np.ones(3), np.arange(3.0))
    with pytest.raises(ValueError):
        r_squared([1.0], [1.0])


def test_nrmse_normalizes_by_range():
    y = np.array([0.0, 10.0, 20.0])
    assert nrmse(y, y + 2.0, 0.0, 20.0) == pytest.approx(0.1)
    with pytest.raises(ZeroRange):
        nrmse(y, y, 5.0, 5.0)


def test_relative_voxel_difference():
    original = np.zeros((2, 2, 2))
    original[0] = 1.0  # four solid voxels
    one_off = original.copy()
    one_off[1, 0, 0] = 1.0
    assert relative_voxel_difference(original, [original]) == 0.0
    assert relative_voxel_difference(VoxelGrid(original), [one_off, original]) == pytest.approx(0.125)
    with pytest.raises(EmptyStructure):
        relative_voxel_difference(np.zeros((2, 2, 2)), [original])
    with pytest.raises(ShapeMismatch):
        relative_voxel_difference(original, [np.zeros((3, 3, 3))])


def test_coefficient_of_variation():
    assert coefficient_of_variation([1.0, 3.0]) == pytest.approx(70.7106781)
    assert coefficient_of_variation([-2.0, -2.0]) == 0.0
    with pytest.raises(ZeroMean):
        coefficient_of_variation([-1.0, 1.0])
    with pytest.raises(ValueError):
        coefficient_of_variation([1.0])


def test_label_range_spans_all_sets():
    lo, hi = label_range(np.array([[1.0, 0.1], [3.0, 0.2]]), np.array([[2.0, -0.1]]))
    np.testing.assert_array_equal(lo, [1.0, -0.1])
    np.testing.assert_array_equal(hi, [3.0, 0.2])


def test_evaluate_split_reports(tmp_path):
    config = ModelConfig(
        latent_dim=2, input_edge=4, channels=(2,), encoder_hidden=(4,), decoder_hidden=(4,),
        final_channels=2, mdn_hidden=(4,),
    )
    model = Model(config, LabelScaler(np.array([1000.0, 0.2]), np.array([100.0, 0.05])))
    rng = np.random.default_rng(0)
    cells = (rng.random((5, 4, 4, 4)) > 0.5).astype(float)
    labels = np.column_stack([rng.uniform(800, 1200, 5), rng.uniform(0.1, 0.3, 5)])

    reports = evaluate_split(model, cells, labels, label_range(labels))
    assert [(r.name, r.prop) for r in reports] == [
        ("recon_accuracy", ""), ("r_squared", "E"), ("nrmse", "E"), ("r_squared", "nu"), ("nrmse", "nu"),
    ]
    assert 0.0 <= reports[0].value <= 1.0
    assert all(r.n_samples == 5 for r in reports)

    path = tmp_path / "evaluation.csv"
    write_evaluation({"val": reports}, path)
    write_evaluation({"test": reports[:1]}, path)
    table = pd.read_csv(path, keep_default_na=False)
    assert list(table.columns) == EVALUATION_COLUMNS
    assert table["split"].tolist() == ["val"] * 5 + ["test"]


def test_metric_report_validation_and_logging(caplog):
    with pytest.raises(ValueError):
        MetricReport("r_squared", 0.5, 0)
    report = MetricReport("nrmse", 0.25, 3, "E")
    assert report.row("test") == {"split": "test", "metric": "nrmse", "property": "E", "value": 0.25, "n": 3}
    with caplog.at_level(logging.INFO):
        log_reports([report], "test")
    assert "nrmse[E]" in caplog.text
