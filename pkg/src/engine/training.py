from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd

from . import autodiff as ad
from .errors import EmptyDataset, NumericalDivergence
from .model import LabelScaler, LossWeights, Model, ModelConfig
from .voxel_core import extract_eighth
from .voxel_io import read_voxels

logger = logging.getLogger(__name__)

LEDGER_COLUMNS = [
    "phase", "rung", "alpha1", "alpha2", "alpha3", "latent_dim",
    "train_recon", "val_recon", "train_kl", "val_kl", "train_nll", "val_nll",
    "epochs", "seconds",
]


@dataclass
class SplitSpec:
    train_frac: float = 0.7
    val_frac: float = 0.2
    test_frac: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        fracs = (self.train_frac, self.val_frac, self.test_frac)
        if min(fracs) < 0 or abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError(f"split fractions must be >= 0 and sum to 1, got {fracs}")


@dataclass
class DownselectSpec:
    keep_fraction: float = 0.6
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.keep_fraction <= 1:
            raise ValueError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")


def _strictly_increasing(values: Sequence[float]) -> bool:
    return all(a < b for a, b in zip(values, values[1:]))


@dataclass
class PhaseSchedule:
    latent_dims: tuple[int, ...] = (4, 8, 16)
    alpha2_ladder: tuple[float, ...] = (1e-4, 1e-3, 1e-2)
    alpha3_ladder: tuple[float, ...] = (1e-4, 1e-3, 1e-2)
    epochs_per_phase: int = 60
    patience: int = 10
    batch_size: int = 16
    lr: ad.LrSchedule = field(default_factory=ad.LrSchedule)
    step1_threshold: float = 0.15
    recon_tolerance: float = 0.15
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("latent_dims", "alpha2_ladder", "alpha3_ladder"):
            ladder = tuple(getattr(self, name))
            setattr(self, name, ladder)
            if not ladder or not _strictly_increasing(ladder):
                raise ValueError(f"{name} must be a non-empty strictly increasing ladder")
        if self.patience < 1:
            raise ValueError("patience must be >= 1")
        if self.epochs_per_phase < 1 or self.batch_size < 1:
            raise ValueError("epochs_per_phase and batch_size must be >= 1")

    @classmethod
    def full_scale(cls, **overrides) -> "PhaseSchedule":
        base = dict(
            latent_dims=(4, 16, 32, 48, 64),
            alpha2_ladder=(5e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1, 1.0),
            alpha3_ladder=(1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0),
            epochs_per_phase=400,
        )
        base.update(overrides)
        return cls(**base)


@dataclass
class TrainingData:
    """Eighth cells (n, e, e, e) with physical labels (n, 2) = (E, nu)."""

    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray

    def __post_init__(self) -> None:
        if len(self.train_x) == 0 or len(self.val_x) == 0:
            raise EmptyDataset("training and validation splits must both be non-empty")


@dataclass
class EpochRecord:
    epoch: int
    learning_rate: float
    train: dict[str, float]
    val: dict[str, float]


@dataclass
class TrainReport:
    history: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = -1
    seconds: float = 0.0

    @property
    def epochs_run(self) -> int:
        return len(self.history)

    @property
    def best(self) -> EpochRecord:
        return self.history[self.best_epoch]


@dataclass
class Rung:
    phase: str
    index: int
    weights: LossWeights
    latent_dim: int
    report: TrainReport
    state: dict[str, np.ndarray]

    def ledger_row(self) -> dict[str, float | int | str]:
        best = self.report.best
        return {
            "phase": self.phase,
            "rung": self.index,
            "alpha1": self.weights.alpha1,
            "alpha2": self.weights.alpha2,
            "alpha3": self.weights.alpha3,
            "latent_dim": self.latent_dim,
            "train_recon": best.train["recon"],
            "val_recon": best.val["recon"],
            "train_kl": best.train["kl"],
            "val_kl": best.val["kl"],
            "train_nll": best.train["nll"],
            "val_nll": best.val["nll"],
            "epochs": self.report.epochs_run,
            "seconds": self.report.seconds,
        }


@dataclass
class ScheduleResult:
    model: Model
    rungs: list[Rung]
    latent_dim: int
    weights: LossWeights
    step1_relative_errors: dict[int, float]

    def ledger(self) -> pd.DataFrame:
        return pd.DataFrame([r.ledger_row() for r in self.rungs], columns=LEDGER_COLUMNS)


@dataclass
class ComparisonReport:
    scratch: dict[str, float]
    schedule: dict[str, float]
    scratch_seconds: float
    schedule_seconds: float

    @property
    def time_ratio(self) -> float:
        return self.schedule_seconds / self.scratch_seconds if self.scratch_seconds > 0 else float("nan")


# -------------- Data preparation --------------

def split_dataset(frame: pd.DataFrame, spec: SplitSpec) -> tuple[pd.DataFrame, pd.DataFrame, pd.DataFrame]:
    """Seeded disjoint train/validation/test partition of the rows."""
    n = len(frame)
    if n == 0:
        raise EmptyDataset("cannot split an empty dataset")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train = int(round(spec.train_frac * n))
    n_val = min(int(round(spec.val_frac * n)), n - n_train)
    parts = np.split(order, [n_train, n_train + n_val])
    return tuple(frame.iloc[p].reset_index(drop=True) for p in parts)  # type: ignore[return-value]


def downselect(frame: pd.DataFrame, spec: DownselectSpec, nu_column: str = "nu_mean") -> pd.DataFrame:
    """Keep floor(keep_fraction * count) of the positive-nu rows; others untouched."""
    nu = frame[nu_column].to_numpy(dtype=np.float64)
    positive = np.flatnonzero(nu > 0)
    keep_n = int(np.floor(spec.keep_fraction * positive.size))
    if keep_n == positive.size:
        return frame.reset_index(drop=True)
    rng = np.random.default_rng(spec.seed)
    kept = rng.choice(positive, size=keep_n, replace=False)
    mask = nu <= 0
    mask[kept] = True
    logger.info("downselect: kept %d of %d positive-nu rows", keep_n, positive.size)
    return frame.loc[mask].reset_index(drop=True)


def load_arrays(
    frame: pd.DataFrame, root: str | Path, logger: Optional[logging.Logger] = None
) -> tuple[np.ndarray, np.ndarray]:
    """Eighth cells and (E, nu) labels for the labeled rows of ``frame``."""
    log = logger or logging.getLogger(__name__)
    root = Path(root)
    cells, labels = [], []
    for row in frame.itertuples(index=False):
        path = root / row.voxel_path
        if not path.exists():
            log.warning("unit %s: voxel file %s missing, skipped", row.id, path)
            continue
        cells.append(extract_eighth(read_voxels(path)).occupancy)
        labels.append((row.E_mean, row.nu_mean))
    if not cells:
        raise EmptyDataset("no readable units in the labeled dataset")
    return np.stack(cells), np.array(labels, dtype=np.float64)


# -------------- Training --------------

def _weighted(terms: dict, w: LossWeights):
    total = ad.mul(terms["recon"], w.alpha1)
    if w.alpha2:
        total = ad.add(total, ad.mul(terms["kl"], w.alpha2))
    if w.alpha3 and "nll" in terms:
        total = ad.add(total, ad.mul(terms["nll"], w.alpha3))
    return total


class Trainer:
    """Runs training phases and the progressive schedule on one dataset.

    The label scaler is fitted on the training split once and shared by every
    model the trainer creates.
    """

    def __init__(
        self,
        data: TrainingData,
        schedule: PhaseSchedule,
        *,
        logger: Optional[logging.Logger] = None,
        clock: Callable[[], float] = time.perf_counter,
    ) -> None:
        self._logger = logger or logging.getLogger(__name__)
        self._clock = clock
        self.data = data
        self.schedule = schedule
        self.scaler = LabelScaler.fit(data.train_y)
        self._train_y = self.scaler.transform(data.train_y)
        self._val_y = self.scaler.transform(data.val_y)

    def new_model(self, config: ModelConfig) -> Model:
        return Model(config, self.scaler)

    def evaluate(self, model: Model, x: np.ndarray, y_std: np.ndarray, weights: LossWeights) -> dict[str, float]:
        """Batch-weighted recon/kl/nll/total on the latent mean (no sampling)."""
        sums = {"recon": 0.0, "kl": 0.0, "nll": 0.0}
        bs = self.schedule.batch_size
        for start in range(0, len(x), bs):
            xb, yb = x[start : start + bs], y_std[start : start + bs]
            terms = model.loss_terms(xb, yb, None)
            for key in sums:
                sums[key] += terms[key].item() * len(xb)
        out = {k: v / len(x) for k, v in sums.items()}
        out["total"] = weights.alpha1 * out["recon"] + weights.alpha2 * out["kl"] + weights.alpha3 * out["nll"]
        return out

    def run_phase(
        self,
        model: Model,
        weights: LossWeights,
        epochs: int | None = None,
        patience: int | None = None,
        label: str = "phase",
    ) -> tuple[Model, TrainReport]:
        """Adam with per-epoch decay and early stopping on the weighted validation loss.

        Stops once ``patience`` consecutive epochs fail to strictly improve the
        best validation loss and restores the best epoch's parameters.
        """
        sched = self.schedule
        epochs = epochs or sched.epochs_per_phase
        patience = patience or sched.patience
        rng = np.random.default_rng(sched.seed)
        adam = ad.AdamState(learning_rate=sched.lr.initial_rate)
        report = TrainReport()
        best_loss = np.inf
        best_state = model.state()
        stale = 0
        started = self._clock()
        x, y = self.data.train_x, self._train_y
        need_labels = weights.alpha3 > 0

        for epoch in range(epochs):
            adam.learning_rate = ad.decay_rate(sched.lr, epoch)
            sums = {"recon": 0.0, "kl": 0.0, "nll": 0.0}
            order = rng.permutation(len(x))
            for start in range(0, len(x), sched.batch_size):
                idx = order[start : start + sched.batch_size]
                with ad.Tape() as tape:
                    terms = model.loss_terms(x[idx], y[idx] if need_labels else None, rng)
                    loss = _weighted(terms, weights)
                if not np.isfinite(loss.item()):
                    raise NumericalDivergence(f"{label}: training loss became {loss.item()} at epoch {epoch}")
                grads = ad.backward(tape, loss)
                named = {p.name: grads[p] for p in model.params.values() if p in grads}
                ad.adam_step(adam, model.params, named)
                for key in ("recon", "kl", "nll"):
                    if key in terms:
                        sums[key] += terms[key].item() * len(idx)
            train = {k: v / len(x) for k, v in sums.items()}
            if not need_labels:
                train["nll"] = self.evaluate(model, x, y, weights)["nll"]
            val = self.evaluate(model, self.data.val_x, self._val_y, weights)
            if not np.isfinite(val["total"]):
                raise NumericalDivergence(f"{label}: validation loss became {val['total']} at epoch {epoch}")
            report.history.append(EpochRecord(epoch, adam.learning_rate, train, val))
            self._logger.debug("%s epoch %d: train recon %.5f, val total %.5f", label, epoch, train["recon"], val["total"])

            if val["total"] < best_loss:
                best_loss = val["total"]
                best_state = model.state()
                report.best_epoch = epoch
                stale = 0
            else:
                stale += 1
                if stale >= patience:
                    self._logger.info("%s: early stop at epoch %d (best %d)", label, epoch, report.best_epoch)
                    break

        model.load_state(best_state)
        report.seconds = self._clock() - started
        self._logger.info(
            "%s: %d epochs, best val total %.5f at epoch %d", label, report.epochs_run, best_loss, report.best_epoch
        )
        return model, report

    # -------------- Progressive schedule --------------

    def progressive_schedule(self, base: ModelConfig) -> ScheduleResult:
        """Latent-dim sweep, then warm-started alpha2 and alpha3 ladders."""
        sched = self.schedule
        rungs: list[Rung] = []

        step1: list[Rung] = []
        for i, d in enumerate(sched.latent_dims):
            w = LossWeights(1.0, 0.0, 0.0)
            model, report = self.run_phase(self.new_model(replace(base, latent_dim=d)), w, label=f"step1[d={d}]")
            step1.append(Rung("step1", i, w, d, report, model.state()))
        rungs += step1
        recon = np.array([r.report.best.val["recon"] for r in step1])
        best = recon.min()
        rel = (recon - best) / best if best > 0 else np.zeros_like(recon)
        chosen = min(r.latent_dim for r, e in zip(step1, rel) if e <= sched.step1_threshold)
        rel_errors = {r.latent_dim: float(e) for r, e in zip(step1, rel)}
        self._logger.info("step1: latent dim %d selected (relative recon errors %s)", chosen, rel_errors)

        model = self.new_model(replace(base, latent_dim=chosen))
        model.load_state(next(r.state for r in step1 if r.latent_dim == chosen))

        step2: list[Rung] = []
        for i, a2 in enumerate(sched.alpha2_ladder):
            w = LossWeights(1.0, a2, 0.0)
            model, report = self.run_phase(model, w, label=f"step2[a2={a2:g}]")
            step2.append(Rung("step2", i, w, chosen, report, model.state()))
        rungs += step2
        recon2 = np.array([r.report.best.val["recon"] for r in step2])
        ok = [r for r, v in zip(step2, recon2) if v <= (1.0 + sched.recon_tolerance) * recon2.min()]
        pick2 = min(ok, key=lambda r: (r.report.best.val["kl"], r.weights.alpha2))
        alpha2 = pick2.weights.alpha2
        self._logger.info("step2: alpha2 %g selected", alpha2)

        model.load_state(pick2.state)
        step3: list[Rung] = []
        for i, a3 in enumerate(sched.alpha3_ladder):
            w = LossWeights(1.0, alpha2, a3)
            model, report = self.run_phase(model, w, label=f"step3[a3={a3:g}]")
            step3.append(Rung("step3", i, w, chosen, report, model.state()))
        rungs += step3
        pick3 = step3[_balanced_index(step3)]
        self._logger.info("step3: alpha3 %g selected", pick3.weights.alpha3)

        model.load_state(pick3.state)
        return ScheduleResult(model, rungs, chosen, pick3.weights, rel_errors)

    def compare_from_scratch(
        self, base: ModelConfig, final: LossWeights, use_schedule: bool = True
    ) -> ComparisonReport:
        """Train from random init with ``final`` weights versus the progressive schedule.

        With ``use_schedule=False`` both arms train from scratch.
        """
        def scratch() -> tuple[dict[str, float], float]:
            model, report = self.run_phase(self.new_model(base), final, label="scratch")
            return dict(report.best.val), report.seconds

        scratch_val, scratch_s = scratch()
        if use_schedule:
            started = self._clock()
            result = self.progressive_schedule(base)
            sched_s = self._clock() - started
            sched_val = self.evaluate(result.model, self.data.val_x, self._val_y, result.weights)
        else:
            sched_val, sched_s = scratch()
        return ComparisonReport(scratch_val, sched_val, scratch_s, sched_s)


def _balanced_index(rungs: Sequence[Rung]) -> int:
    """Rung minimizing the min-max normalized sum of val recon, KL and NLL.

    Ties go to the earliest (smallest coefficient) rung.
    """
    table = np.array([[r.report.best.val[k] for k in ("recon", "kl", "nll")] for r in rungs])
    lo, hi = table.min(axis=0), table.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    score = ((table - lo) / span).sum(axis=1)
    return int(np.argmin(score))


def write_ledger(result: ScheduleResult, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    result.ledger().to_csv(path, index=False, lineterminator="\n")
    return path
