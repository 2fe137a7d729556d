import itertools
import logging

import numpy as np
import pandas as pd
import pytest

from src.engine.errors import EmptyDataset, NumericalDivergence
from src.engine.model import LossWeights, ModelConfig
from src.engine.training import (
    LEDGER_COLUMNS,
    DownselectSpec,
    EpochRecord,
    PhaseSchedule,
    Rung,
    SplitSpec,
    Trainer,
    TrainingData,
    TrainReport,
    _balanced_index,
    downselect,
    load_arrays,
    split_dataset,
    write_ledger,
)
from src.engine.voxel_core import VoxelGrid
from src.engine.voxel_io import write_voxels


def _tiny(**overrides) -> ModelConfig:
    base = dict(
        latent_dim=2,
        input_edge=4,
        channels=(2,),
        encoder_hidden=(4,),
        decoder_hidden=(4,),
        final_channels=2,
        mdn_hidden=(4,),
    )
    base.update(overrides)
    return ModelConfig(**base)


def _data(n_train: int = 4, n_val: int = 2) -> TrainingData:
    rng = np.random.default_rng(0)
    cells = (rng.random((n_train + n_val, 4, 4, 4)) > 0.5).astype(float)
    labels = np.column_stack([rng.uniform(1000, 5000, n_train + n_val), rng.uniform(-0.2, 0.4, n_train + n_val)])
    return TrainingData(cells[:n_train], labels[:n_train], cells[n_train:], labels[n_train:])


def _trainer(**schedule) -> Trainer:
    defaults = dict(epochs_per_phase=10, patience=3, batch_size=2)
    defaults.update(schedule)
    return Trainer(_data(), PhaseSchedule(**defaults), clock=itertools.count().__next__)


def _scripted(totals):
    values = iter(totals)

    def evaluate(model, x, y_std, weights):
        return {"recon": 0.1, "kl": 0.1, "nll": 0.1, "total": next(values)}

    return evaluate


def test_split_sizes_and_disjointness():
    frame = pd.DataFrame({"id": [f"u{i}" for i in range(10)]})
    train, val, test = split_dataset(frame, SplitSpec(seed=3))
    assert (len(train), len(val), len(test)) == (7, 2, 1)
    ids = train["id"].tolist() + val["id"].tolist() + test["id"].tolist()
    assert sorted(ids) == sorted(frame["id"])
    again = split_dataset(frame, SplitSpec(seed=3))
    assert again[0]["id"].tolist() == train["id"].tolist()
    with pytest.raises(EmptyDataset):
        split_dataset(frame.iloc[:0], SplitSpec())
    with pytest.raises(ValueError):
        SplitSpec(0.5, 0.5, 0.5)


def test_downselect_only_touches_positive_poisson_rows():
    frame = pd.DataFrame({"id": list("abcdef"), "nu_mean": [-0.1, 0.2, 0.3, 0.4, 0.5, -0.2]})
    kept = downselect(frame, DownselectSpec(keep_fraction=0.5, seed=1))
    assert len(kept) == 4
    assert {"a", "f"} <= set(kept["id"])
    assert (kept["nu_mean"] > 0).sum() == 2
    assert downselect(frame, DownselectSpec(keep_fraction=1.0))["id"].tolist() == list("abcdef")
    with pytest.raises(ValueError):
        DownselectSpec(keep_fraction=0.0)


def test_schedule_validation():
    assert PhaseSchedule.full_scale().latent_dims == (4, 16, 32, 48, 64)
    with pytest.raises(ValueError):
        PhaseSchedule(latent_dims=(8, 4))
    with pytest.raises(ValueError):
        PhaseSchedule(alpha2_ladder=())
    with pytest.raises(ValueError):
        PhaseSchedule(patience=0)
    with pytest.raises(EmptyDataset):
        TrainingData(np.zeros((0, 4, 4, 4)), np.zeros((0, 2)), np.zeros((1, 4, 4, 4)), np.zeros((1, 2)))


def test_early_stopping_restores_best_epoch(monkeypatch):
    trainer = _trainer()
    snapshots = []
    scripted = _scripted([3.0, 2.0, 2.5, 2.4, 2.6, 1.0, 1.0])

    def evaluate(model, x, y_std, weights):
        snapshots.append(model.state())
        return scripted(model, x, y_std, weights)

    monkeypatch.setattr(trainer, "evaluate", evaluate)
    model, report = trainer.run_phase(trainer.new_model(_tiny()), LossWeights(1.0, 1e-3, 1e-3))

    assert report.epochs_run == 5
    assert report.best_epoch == 1
    assert report.seconds > 0
    for name, value in model.state().items():
        np.testing.assert_array_equal(value, snapshots[1][name])


def test_equal_validation_loss_is_not_an_improvement(monkeypatch):
    trainer = _trainer(patience=2)
    monkeypatch.setattr(trainer, "evaluate", _scripted([1.0, 1.0, 1.0, 0.5]))
    _, report = trainer.run_phase(trainer.new_model(_tiny()), LossWeights(1.0, 0.0, 1e-3))
    assert report.epochs_run == 3
    assert report.best_epoch == 0


def test_divergent_validation_raises(monkeypatch):
    trainer = _trainer()
    monkeypatch.setattr(trainer, "evaluate", _scripted([float("nan")]))
    with pytest.raises(NumericalDivergence):
        trainer.run_phase(trainer.new_model(_tiny()), LossWeights(1.0, 0.0, 1e-3))


def test_real_phase_records_decayed_learning_rate():
    trainer = _trainer(epochs_per_phase=2, patience=5)
    _, report = trainer.run_phase(trainer.new_model(_tiny()), LossWeights(1.0, 1e-3, 1e-3), label="smoke")
    assert report.epochs_run == 2
    lr = trainer.schedule.lr
    assert report.history[1].learning_rate == pytest.approx(lr.initial_rate * lr.decay)
    for record in report.history:
        assert all(np.isfinite(v) for v in record.val.values())
        assert set(record.train) == {"recon", "kl", "nll"}


def _report(recon: float, kl: float, nll: float) -> TrainReport:
    val = {"recon": recon, "kl": kl, "nll": nll, "total": recon}
    return TrainReport([EpochRecord(0, 1e-3, dict(val), val)], best_epoch=0, seconds=1.0)


def test_progressive_schedule_warm_starts_each_rung(monkeypatch):
    scripted = iter(
        [
            (0.30, 1.0, 1.0), (0.20, 1.0, 1.0), (0.19, 1.0, 1.0),  # latent dims 4, 8, 16
            (0.20, 5.0, 1.0), (0.21, 3.0, 1.0), (0.50, 1.0, 1.0),  # alpha2 ladder
            (0.20, 1.0, 3.0), (0.20, 1.0, 1.0), (0.20, 1.0, 2.0),  # alpha3 ladder
        ]
    )
    calls = []
    counter = itertools.count()

    def fake_run_phase(self, model, weights, epochs=None, patience=None, label="phase"):
        first = next(iter(model.params.values()))
        calls.append((model.config.latent_dim, weights, float(first.data.flat[0]), id(model)))
        stamp = float(next(counter))
        for p in model.params.values():
            p.data = np.full(p.shape, stamp)
        return model, _report(*next(scripted))

    monkeypatch.setattr(Trainer, "run_phase", fake_run_phase)
    trainer = _trainer(latent_dims=(4, 8, 16))
    result = trainer.progressive_schedule(_tiny())

    assert result.latent_dim == 8
    assert result.step1_relative_errors[16] == 0.0
    assert result.step1_relative_errors[8] == pytest.approx(0.01 / 0.19)
    assert result.weights == LossWeights(1.0, 1e-3, 1e-3)

    step2, step3 = calls[3:6], calls[6:9]
    assert [c[0] for c in step2 + step3] == [8] * 6
    assert step2[0][2] == 1.0  # step1 rung for d=8 ran second
    assert [c[1].alpha2 for c in step2] == [1e-4, 1e-3, 1e-2]
    assert step3[0][2] == 4.0  # chosen alpha2 rung
    assert all(c[1].alpha2 == 1e-3 for c in step3)
    assert len({c[3] for c in step2 + step3}) == 1
    assert all(np.all(v == 7.0) for v in result.model.state().values())


def test_ledger_has_one_row_per_rung(monkeypatch, tmp_path):
    def fake_run_phase(self, model, weights, epochs=None, patience=None, label="phase"):
        return model, _report(0.2, 1.0, 1.0)

    monkeypatch.setattr(Trainer, "run_phase", fake_run_phase)
    result = _trainer().progressive_schedule(_tiny())
    ledger = result.ledger()
    assert list(ledger.columns) == LEDGER_COLUMNS
    assert len(ledger) == 9
    assert ledger["phase"].tolist() == ["step1"] * 3 + ["step2"] * 3 + ["step3"] * 3
    # ties resolve to the smallest latent dim and coefficients
    assert result.latent_dim == 4
    assert result.weights == LossWeights(1.0, 1e-4, 1e-4)

    path = write_ledger(result, tmp_path / "out" / "ledger.csv")
    assert pd.read_csv(path)["rung"].tolist() == [0, 1, 2] * 3


def test_balanced_index_prefers_earliest_on_ties():
    rungs = [Rung("step3", i, LossWeights(), 2, _report(0.1, 0.1, 0.1), {}) for i in range(3)]
    assert _balanced_index(rungs) == 0


def test_compare_from_scratch(monkeypatch):
    def fake_run_phase(self, model, weights, epochs=None, patience=None, label="phase"):
        return model, _report(0.2, 1.0, 1.0)

    monkeypatch.setattr(Trainer, "run_phase", fake_run_phase)
    report = _trainer().compare_from_scratch(_tiny(), LossWeights(1.0, 1e-3, 1e-3), use_schedule=False)
    assert report.scratch["recon"] == 0.2
    assert report.time_ratio == 1.0


def test_load_arrays_skips_missing_files(tmp_path, caplog):
    write_voxels(tmp_path / "v" / "a.vox", VoxelGrid(np.ones((4, 4, 4)), binary_flag=True))
    frame = pd.DataFrame(
        {"id": ["a", "b"], "voxel_path": ["v/a.vox", "v/b.vox"], "E_mean": [10.0, 20.0], "nu_mean": [0.1, 0.2]}
    )
    with caplog.at_level(logging.WARNING):
        cells, labels = load_arrays(frame, tmp_path)
    assert cells.shape == (1, 2, 2, 2)
    np.testing.assert_array_equal(labels, [[10.0, 0.1]])
    assert any("b" in r.getMessage() for r in caplog.records)
    with pytest.raises(EmptyDataset):
        load_arrays(frame.iloc[1:], tmp_path)
