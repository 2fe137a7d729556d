"""Evaluation metrics for reconstruction, property prediction and robustness."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd

from .errors import ConstantTruth, EmptyStructure, ShapeMismatch, ZeroMean, ZeroRange
from .model import PROPERTIES, Model
from .voxel_core import VoxelGrid

logger = logging.getLogger(__name__)

EVALUATION_COLUMNS = ["split", "metric", "property", "value", "n"]


def _occupancy(grids) -> np.ndarray:
    if isinstance(grids, VoxelGrid):
        return grids.occupancy[None]
    if isinstance(grids, (list, tuple)):
        return np.stack([g.occupancy if isinstance(g, VoxelGrid) else np.asarray(g, dtype=np.float64) for g in grids])
    return np.asarray(grids, dtype=np.float64)


def recon_accuracy(originals, reconstructions) -> float:
    """Fraction of matching voxels over all pairs (1 - mean absolute difference)."""
    a, b = _occupancy(originals), _occupancy(reconstructions)
    if a.shape != b.shape:
        raise ShapeMismatch("recon_accuracy: paired grids differ", a.shape, b.shape)
    return float(1.0 - np.abs(a - b).mean())


def r_squared(truth, predictions) -> float:
    y = np.asarray(truth, dtype=np.float64)
    y_hat = np.asarray(predictions, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ShapeMismatch("r_squared", y.shape, y_hat.shape)
    if y.size < 2:
        raise ValueError("r_squared needs at least 2 values")
    sst = float(((y - y.mean()) ** 2).sum())
    if sst == 0.0:
        raise ConstantTruth("truth values are constant; R^2 is undefined")
    return 1.0 - float(((y - y_hat) ** 2).sum()) / sst


def nrmse(truth, predictions, range_min: float, range_max: float) -> float:
    """RMSE normalized by the label range (taken over train and validation)."""
    if not range_max > range_min:
        raise ZeroRange(f"label range [{range_min}, {range_max}] is empty")
    y = np.asarray(truth, dtype=np.float64)
    y_hat = np.asarray(predictions, dtype=np.float64)
    if y.shape != y_hat.shape:
        raise ShapeMismatch("nrmse", y.shape, y_hat.shape)
    return float(np.sqrt(((y - y_hat) ** 2).mean()) / (range_max - range_min))


def relative_voxel_difference(original, generated: Sequence) -> float:
    """Mean over generated grids of sum|O - R| / sum O."""
    o = _occupancy(original)[0]
    solid = float(o.sum())
    if solid == 0.0:
        raise EmptyStructure("original grid holds no solid voxel")
    r = _occupancy(list(generated))
    if r.shape[1:] != o.shape:
        raise ShapeMismatch("relative_voxel_difference", o.shape, r.shape[1:])
    return float((np.abs(r - o[None]).reshape(len(r), -1).sum(axis=1) / solid).mean())


def coefficient_of_variation(values) -> float:
    """Sample std over |mean|, in percent."""
    v = np.asarray(values, dtype=np.float64)
    if v.size < 2:
        raise ValueError("coefficient_of_variation needs at least 2 values")
    mean = float(v.mean())
    if mean == 0.0:
        raise ZeroMean("mean is zero; CV is undefined")
    return 100.0 * float(v.std(ddof=1)) / abs(mean)


@dataclass
class MetricReport:
    name: str
    value: float
    n_samples: int
    prop: str = ""
    extra: dict[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")

    def row(self, split: str) -> dict[str, object]:
        return {"split": split, "metric": self.name, "property": self.prop, "value": self.value, "n": self.n_samples}


def evaluate_split(
    model: Model,
    cells: np.ndarray,
    labels: np.ndarray,
    label_range: tuple[np.ndarray, np.ndarray],
    threshold: float = 0.5,
) -> list[MetricReport]:
    """Reconstruction accuracy plus R^2 and NRMSE per property on one split.

    Reconstructions decode the latent mean and are binarized at ``threshold``;
    property predictions come from the latent mean as well. ``label_range``
    holds per-property (min, max) over train and validation labels.
    """
    cells = np.asarray(cells, dtype=np.float64)
    n = len(cells)
    code = model.encode(cells)
    recon = (np.asarray(model.decode(code.mean)) >= threshold).astype(np.float64)
    original = (cells >= threshold).astype(np.float64)
    reports = [MetricReport("recon_accuracy", recon_accuracy(original, recon), n)]

    pred = model.predict_properties(code.mean).means
    lo, hi = (np.asarray(v, dtype=np.float64) for v in label_range)
    for k, name in enumerate(PROPERTIES):
        reports.append(MetricReport("r_squared", r_squared(labels[:, k], pred[:, k]), n, name))
        reports.append(MetricReport("nrmse", nrmse(labels[:, k], pred[:, k], lo[k], hi[k]), n, name))
    return reports


def write_evaluation(reports: dict[str, list[MetricReport]], path: str | Path) -> Path:
    """Append rows per split to the evaluation CSV, writing the header once."""
    path = Path(path)
    rows = [r.row(split) for split, items in reports.items() for r in items]
    frame = pd.DataFrame(rows, columns=EVALUATION_COLUMNS)
    frame.to_csv(path, mode="a", header=not path.exists(), index=False, lineterminator="\n")
    return path


def label_range(*label_sets: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    stacked = np.concatenate([np.atleast_2d(s) for s in label_sets], axis=0)
    return stacked.min(axis=0), stacked.max(axis=0)


def log_reports(reports: Sequence[MetricReport], split: str, log: Optional[logging.Logger] = None) -> None:
    log = log or logger
    for r in reports:
        log.info("%s %s%s = %.6g (n=%d)", split, r.name, f"[{r.prop}]" if r.prop else "", r.value, r.n_samples)
