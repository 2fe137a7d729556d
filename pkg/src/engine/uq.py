"""Latent-space uncertainty quantification.

For a start structure (or latent mean) the loop decodes, optionally
binarizes, re-encodes to a fresh latent Gaussian, draws N latent samples,
runs the property head on each and aggregates the N predictions:

- predictive mean: mean of the sampled means;
- aleatoric std: mean of the sampled stds (or the root of the mean variance);
- epistemic std: sample std (N - 1) of the sampled means;
- total std: root of the summed squares of the two.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import pandas as pd

from .errors import IncompressibleLimit, InsufficientSamples
from .model import PROPERTIES, LatentCode, MdnPrediction
from .voxel_core import DEFAULT_THRESHOLD, EighthCell, VoxelGrid, binarize, extract_eighth, largest_component

logger = logging.getLogger(__name__)


class SurrogateModel(Protocol):
    """What the UQ loop and the optimizer need from a trained model."""

    def encode(self, x) -> LatentCode: ...
    def decode(self, z): ...
    def predict_properties(self, z) -> MdnPrediction: ...


@dataclass
class UqConfig:
    n_samples: int = 80
    seed: int = 0
    binarize_before_reencode: bool = True
    variance_mean_aleatoric: bool = False
    latent_std_scale: float = 1.0
    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self) -> None:
        if self.n_samples < 2:
            raise InsufficientSamples(f"n_samples must be >= 2, got {self.n_samples}")
        if self.latent_std_scale < 0:
            raise ValueError("latent_std_scale must be >= 0")


@dataclass(frozen=True)
class PropertyUncertainty:
    mean: float
    aleatoric: float
    epistemic: float
    total: float


@dataclass
class UqResult:
    properties: dict[str, PropertyUncertainty] = field(default_factory=dict)

    def __getitem__(self, name: str) -> PropertyUncertainty:
        return self.properties[name]

    def to_dict(self) -> dict[str, dict[str, float]]:
        return {
            name: {"mean": p.mean, "aleatoric": p.aleatoric, "epistemic": p.epistemic, "total": p.total}
            for name, p in self.properties.items()
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def aggregate(
    samples: Sequence[MdnPrediction] | MdnPrediction,
    variance_mean: bool = False,
    names: Sequence[str] = PROPERTIES,
) -> UqResult:
    """Reduce N sampled predictions to mean, aleatoric, epistemic and total std.

    Accepts a list of single predictions or one stacked prediction with a
    leading sample axis.
    """
    if isinstance(samples, MdnPrediction):
        means, stds = np.atleast_2d(samples.means), np.atleast_2d(samples.stds)
    else:
        if len(samples) == 0:
            raise InsufficientSamples("aggregate needs at least 2 samples, got 0")
        means = np.stack([np.atleast_1d(s.means) for s in samples])
        stds = np.stack([np.atleast_1d(s.stds) for s in samples])
    n = means.shape[0]
    if n < 2:
        raise InsufficientSamples(f"aggregate needs at least 2 samples, got {n}")
    mu = means.mean(axis=0)
    if variance_mean:
        aleatoric = np.sqrt((stds**2).mean(axis=0))
    else:
        aleatoric = stds.mean(axis=0)
    epistemic = means.std(axis=0, ddof=1)
    total = np.sqrt(aleatoric**2 + epistemic**2)
    props = {
        name: PropertyUncertainty(float(mu[i]), float(aleatoric[i]), float(epistemic[i]), float(total[i]))
        for i, name in enumerate(names[: means.shape[1]])
    }
    return UqResult(props)


def _start_code(start, model: SurrogateModel) -> LatentCode:
    if isinstance(start, VoxelGrid) and not isinstance(start, EighthCell):
        start = extract_eighth(start)
    if isinstance(start, VoxelGrid):
        return model.encode(start)
    z = np.asarray(start, dtype=np.float64)
    return LatentCode(z, np.zeros_like(z))


def reencode(start, model: SurrogateModel, cfg: UqConfig) -> LatentCode:
    """Steps 1-3: latent mean of the start, decode, binarize, re-encode."""
    code = _start_code(start, model)
    decoded = model.decode(code.mean)
    if cfg.binarize_before_reencode:
        decoded = binarize(decoded, cfg.threshold)
    return model.encode(decoded)


def _draws(cfg: UqConfig, n: int, dim: int) -> np.ndarray:
    return np.random.default_rng(cfg.seed).standard_normal((n, dim))


def sample_latents(code: LatentCode, eps: np.ndarray, scale: float = 1.0) -> np.ndarray:
    return code.mean + (scale * code.std) * eps


def predict_with_uncertainty(start, model: SurrogateModel, cfg: UqConfig | None = None) -> UqResult:
    cfg = cfg or UqConfig()
    code = reencode(start, model, cfg)
    z = sample_latents(code, _draws(cfg, cfg.n_samples, code.dim), cfg.latent_std_scale)
    pred = model.predict_properties(z)
    return aggregate(pred, cfg.variance_mean_aleatoric)


def sample_batch(latents: np.ndarray, model: SurrogateModel, cfg: UqConfig | None = None) -> MdnPrediction:
    """Sampled head outputs for a population, shaped (pop, N, properties).

    Every start reuses the same N standard-normal draws from ``cfg.seed``.
    """
    cfg = cfg or UqConfig()
    latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    decoded = model.decode(latents)
    if cfg.binarize_before_reencode:
        decoded = (decoded >= cfg.threshold).astype(np.float64)
    code = model.encode(decoded)
    eps = _draws(cfg, cfg.n_samples, latents.shape[1])
    # (pop, N, d) -> one head call over pop*N rows
    z = code.mean[:, None, :] + (cfg.latent_std_scale * code.std)[:, None, :] * eps[None]
    pred = model.predict_properties(z.reshape(-1, latents.shape[1]))
    shape = (len(latents), cfg.n_samples, -1)
    return MdnPrediction(pred.means.reshape(shape), pred.stds.reshape(shape))


def predict_batch(latents: np.ndarray, model: SurrogateModel, cfg: UqConfig | None = None) -> list[UqResult]:
    """UQ for a population of latent means with common random numbers."""
    cfg = cfg or UqConfig()
    samples = sample_batch(latents, model, cfg)
    return [
        aggregate(MdnPrediction(m, s), cfg.variance_mean_aleatoric)
        for m, s in zip(samples.means, samples.stds)
    ]


def induce_bulk_modulus(
    pred: MdnPrediction, cfg: UqConfig | None = None, draws: int = 64
) -> PropertyUncertainty:
    """Bulk-modulus uncertainty from per-sample (E, nu) Gaussians.

    Each latent sample's K distribution is estimated from ``draws`` seeded
    (E, nu) draws; the per-sample K mean and std then go through the same
    aggregation as E and nu. Raises IncompressibleLimit when any draw reaches
    nu >= 0.5.
    """
    cfg = cfg or UqConfig()
    means, stds = np.atleast_2d(pred.means), np.atleast_2d(pred.stds)
    rng = np.random.default_rng(cfg.seed + 1)
    eps = rng.standard_normal((draws, 2))
    E = means[:, None, 0] + stds[:, None, 0] * eps[None, :, 0]
    nu = means[:, None, 1] + stds[:, None, 1] * eps[None, :, 1]
    denom = 1.0 - 2.0 * nu
    if np.any(denom <= 1e-9):
        raise IncompressibleLimit(f"nu draws reach {float(nu.max()):.4f}; K has no finite value")
    K = E / (3.0 * denom)
    k_pred = MdnPrediction(K.mean(axis=1)[:, None], K.std(axis=1)[:, None])
    return aggregate(k_pred, cfg.variance_mean_aleatoric, names=("K",))["K"]


def convergence_sweep(
    start, model: SurrogateModel, n_values: Sequence[int], cfg: UqConfig | None = None
) -> pd.DataFrame:
    """Total std per property for growing sample counts.

    Draws are nested: the run at N uses the first N draws of one base stream.
    """
    cfg = cfg or UqConfig()
    n_values = list(n_values)
    if not n_values or any(n < 2 for n in n_values) or n_values != sorted(n_values):
        raise InsufficientSamples("n_values must be ascending and each >= 2")
    code = reencode(start, model, cfg)
    eps = _draws(cfg, n_values[-1], code.dim)
    rows = []
    for n in n_values:
        pred = model.predict_properties(sample_latents(code, eps[:n], cfg.latent_std_scale))
        res = aggregate(pred, cfg.variance_mean_aleatoric)
        rows.append({"N": n, "total_E": res["E"].total, "total_nu": res["nu"].total})
        logger.debug("convergence N=%d: total E %.4g, total nu %.4g", n, rows[-1]["total_E"], rows[-1]["total_nu"])
    return pd.DataFrame(rows, columns=["N", "total_E", "total_nu"])


def uq_audit(
    grids: Sequence[VoxelGrid],
    model: SurrogateModel,
    material,
    cfg: UqConfig | None = None,
    n_fea: int = 8,
    solver_cfg=None,
) -> pd.DataFrame:
    """Predicted uncertainty against FEA under material noise, one row per grid.

    ``material`` is the base :class:`MaterialSample`; ``n_fea`` material draws
    give the true mean and aleatoric std. The voxel column compares the
    binarized start eighth with the binarized decodes of the N latent samples.
    """
    from .homogenizer import true_aleatoric_study
    from .metrics import relative_voxel_difference

    cfg = cfg or UqConfig()
    rows = []
    for i, grid in enumerate(grids):
        code = reencode(grid, model, cfg)
        z = sample_latents(code, _draws(cfg, cfg.n_samples, code.dim), cfg.latent_std_scale)
        res = aggregate(model.predict_properties(z), cfg.variance_mean_aleatoric)
        eighth = binarize(extract_eighth(grid), cfg.threshold)
        generated = (np.asarray(model.decode(z)) >= cfg.threshold).astype(np.float64)
        cleaned, _ = largest_component(binarize(grid, cfg.threshold))
        study = true_aleatoric_study(cleaned, material, n_fea, seed=cfg.seed, cfg=solver_cfg)
        row = {"index": i, "voxel_difference": relative_voxel_difference(eighth, generated)}
        for name in PROPERTIES:
            p = res[name]
            row[f"pred_mu_{name}"] = p.mean
            row[f"pred_total_{name}"] = p.total
            row[f"pred_aleatoric_{name}"] = p.aleatoric
            row[f"fea_mu_{name}"] = study.mean[name]
            row[f"fea_std_{name}"] = study.std[name]
        rows.append(row)
        logger.info("audit %d: E %.4g+/-%.3g (fea %.4g+/-%.3g)", i, row["pred_mu_E"], row["pred_aleatoric_E"], row["fea_mu_E"], row["fea_std_E"])
    return pd.DataFrame(rows)
