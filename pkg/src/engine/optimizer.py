"""Constrained NSGA-II over the latent space of a trained model.

All objectives are maximized. A candidate latent vector is decoded, mirrored
into the full cell, binarized and reduced to its largest connected
component; its volume fraction must sit within ``vf_tolerance`` of the
target. Robust designs score each property as ``mean - beta * total_std``
from the UQ loop, while deterministic designs use the predicted means
directly.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd

from .errors import DegenerateBounds, EmptyDataset, EmptyStructure, IncompressibleLimit
from .generators import MaterialSample
from .homogenizer import ElasticProps, SolverConfig, bulk_modulus, effective_properties, true_aleatoric_study
from .model import MdnPrediction
from .uq import PropertyUncertainty, SurrogateModel, UqConfig, aggregate, induce_bulk_modulus, sample_batch
from .voxel_core import EighthCell, VoxelGrid, binarize, largest_component, mirror_eighth, volume_fraction
from .voxel_io import write_voxels

logger = logging.getLogger(__name__)

ARCHIVE_COLUMNS = [
    "case", "beta", "z_json",
    "pred_mu_E", "pred_sigma_E", "pred_mu_nu", "pred_sigma_nu", "pred_mu_K", "pred_sigma_K",
    "vf", "fea_E", "fea_nu", "fea_K",
]


class Selector(str, Enum):
    E = "E"
    NU = "nu"
    K = "K"


class DesignMode(str, Enum):
    ROBUST = "robust"
    DETERMINISTIC = "deterministic"


@dataclass(frozen=True)
class Objective:
    selector: Selector
    beta: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "selector", Selector(self.selector))
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")


@dataclass(frozen=True, eq=False)
class LatentBounds:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self) -> None:
        lo = np.asarray(self.lower, dtype=np.float64)
        hi = np.asarray(self.upper, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise ValueError("bounds must be two vectors of equal length")
        if np.any(lo >= hi):
            raise DegenerateBounds(f"latent bounds collapse in dims {np.flatnonzero(lo >= hi).tolist()}")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def dim(self) -> int:
        return int(self.lower.size)


@dataclass
class DesignProblem:
    objectives: list[Objective]
    vf_target: float
    bounds: LatentBounds
    vf_tolerance: float = 0.001
    mode: DesignMode = DesignMode.ROBUST
    case: str = "custom"

    def __post_init__(self) -> None:
        self.mode = DesignMode(self.mode)
        if not self.objectives:
            raise ValueError("a design problem needs at least one objective")
        if not self.vf_tolerance > 0:
            raise ValueError("vf_tolerance must be > 0")


@dataclass(eq=False)
class Individual:
    z: np.ndarray
    objective_values: np.ndarray
    constraint_violation: float
    vf: float
    uq: Optional[dict[str, PropertyUncertainty]] = None
    means: Optional[dict[str, float]] = None
    grid: Optional[VoxelGrid] = None

    @property
    def feasible(self) -> bool:
        return self.constraint_violation == 0.0


@dataclass
class NsgaConfig:
    population: int = 64
    generations: int = 100
    sbx_eta: float = 15.0
    mutation_eta: float = 20.0
    mutation_prob: Optional[float] = None  # None -> 1/d
    crossover_prob: float = 0.9
    seed: int = 0
    log_every: int = 10

    def __post_init__(self) -> None:
        if self.population < 4 or self.population % 2:
            raise ValueError(f"population must be even and >= 4, got {self.population}")
        if self.generations < 0:
            raise ValueError("generations must be >= 0")


def latent_bounds(latents: np.ndarray) -> LatentBounds:
    """Per-dimension extrema of encoded training means."""
    latents = np.asarray(latents, dtype=np.float64)
    if latents.size == 0:
        raise EmptyDataset("no encoded samples to bound")
    latents = np.atleast_2d(latents)
    return LatentBounds(latents.min(axis=0), latents.max(axis=0))


def robust_objective(uq: dict[str, PropertyUncertainty], selector: Selector | str, beta: float) -> float:
    p = uq[Selector(selector).value]
    return p.mean - beta * p.total


def case_problem(
    case: str,
    bounds: LatentBounds,
    beta: float = 5.0,
    vf_target: Optional[float] = None,
    mode: DesignMode | str = DesignMode.ROBUST,
) -> DesignProblem:
    """Presets: ``bulk`` maximizes K at V_f 0.30, ``e-nu`` maximizes E and nu at V_f 0.32."""
    if case == "bulk":
        objectives = [Objective(Selector.K, beta)]
        target = 0.30
    elif case == "e-nu":
        objectives = [Objective(Selector.E, beta), Objective(Selector.NU, beta)]
        target = 0.32
    else:
        raise ValueError(f"unknown design case {case!r}")
    return DesignProblem(objectives, vf_target if vf_target is not None else target, bounds, mode=mode, case=case)


# -------------- Evaluation --------------

def _structure(eighth: np.ndarray) -> tuple[Optional[VoxelGrid], float]:
    full = binarize(mirror_eighth(EighthCell(np.clip(eighth, 0.0, 1.0))))
    try:
        cleaned, _ = largest_component(full)
    except EmptyStructure:
        return None, 0.0
    return cleaned, volume_fraction(cleaned)


def _deterministic_means(model: SurrogateModel, Z: np.ndarray) -> np.ndarray:
    return np.atleast_2d(model.predict_properties(Z).means)


def evaluate_population(
    Z: np.ndarray, model: SurrogateModel, problem: DesignProblem, uq_cfg: Optional[UqConfig] = None
) -> list[Individual]:
    Z = np.atleast_2d(np.asarray(Z, dtype=np.float64))
    uq_cfg = uq_cfg or UqConfig()
    decoded = model.decode(Z)
    m = len(problem.objectives)

    if problem.mode is DesignMode.ROBUST:
        samples = sample_batch(Z, model, uq_cfg)
    else:
        det = _deterministic_means(model, Z)

    out: list[Individual] = []
    for i, z in enumerate(Z):
        grid, vf = _structure(decoded[i])
        if grid is None:
            out.append(Individual(z.copy(), np.zeros(m), float("inf"), 0.0))
            continue
        violation = max(0.0, abs(vf - problem.vf_target) - problem.vf_tolerance)
        try:
            if problem.mode is DesignMode.ROBUST:
                pred = MdnPrediction(samples.means[i], samples.stds[i])
                uq = dict(aggregate(pred, uq_cfg.variance_mean_aleatoric).properties)
                uq["K"] = induce_bulk_modulus(pred, uq_cfg)
                values = [robust_objective(uq, o.selector, o.beta) for o in problem.objectives]
                means = {k: v.mean for k, v in uq.items()}
            else:
                uq = None
                E, nu = det[i]
                K = bulk_modulus(ElasticProps(float(E), float(nu), 0.0))
                means = {"E": float(E), "nu": float(nu), "K": K}
                values = [means[o.selector.value] for o in problem.objectives]
        except IncompressibleLimit:
            logger.warning("candidate %d: predicted nu leaves K undefined; marked infeasible", i)
            out.append(Individual(z.copy(), np.zeros(m), float("inf"), vf, grid=grid))
            continue
        out.append(Individual(z.copy(), np.array(values, dtype=np.float64), violation, vf, uq, means, grid))
    return out


def evaluate(z: np.ndarray, model: SurrogateModel, problem: DesignProblem, uq_cfg: Optional[UqConfig] = None) -> Individual:
    return evaluate_population(np.asarray(z)[None], model, problem, uq_cfg)[0]


# -------------- Sorting --------------

def _domination_matrix(F: np.ndarray, V: np.ndarray) -> np.ndarray:
    """D[i, j] is True when i constraint-dominates j (maximization)."""
    feas = V <= 0
    ge = np.all(F[:, None, :] >= F[None, :, :], axis=-1)
    gt = np.any(F[:, None, :] > F[None, :, :], axis=-1)
    pareto = ge & gt & feas[:, None] & feas[None, :]
    feas_over_infeas = feas[:, None] & ~feas[None, :]
    both_infeas = ~feas[:, None] & ~feas[None, :]
    less_violation = both_infeas & (V[:, None] < V[None, :])
    return pareto | feas_over_infeas | less_violation


def non_dominated_sort(objectives: np.ndarray, violations: Optional[np.ndarray] = None) -> list[np.ndarray]:
    """Fronts F1, F2, ... as index arrays under constraint-domination."""
    F = np.atleast_2d(np.asarray(objectives, dtype=np.float64))
    n = F.shape[0]
    V = np.zeros(n) if violations is None else np.asarray(violations, dtype=np.float64)
    D = _domination_matrix(F, V)
    counts = D.sum(axis=0)
    fronts: list[np.ndarray] = []
    current = np.flatnonzero(counts == 0)
    while current.size:
        fronts.append(current)
        counts = counts - D[current].sum(axis=0)
        counts[current] = -1
        current = np.flatnonzero(counts == 0)
    return fronts


def crowding_distance(objectives: np.ndarray) -> np.ndarray:
    F = np.atleast_2d(np.asarray(objectives, dtype=np.float64))
    n, m = F.shape
    if n <= 2:
        return np.full(n, np.inf)
    dist = np.zeros(n)
    for k in range(m):
        order = np.argsort(F[:, k], kind="stable")
        vals = F[order, k]
        dist[order[0]] = dist[order[-1]] = np.inf
        span = vals[-1] - vals[0]
        if span <= 0:
            continue
        dist[order[1:-1]] += (vals[2:] - vals[:-2]) / span
    return dist


def _rank_and_crowd(F: np.ndarray, V: np.ndarray) -> tuple[np.ndarray, np.ndarray, list[np.ndarray]]:
    fronts = non_dominated_sort(F, V)
    rank = np.empty(len(F), dtype=np.int64)
    crowd = np.empty(len(F))
    for r, front in enumerate(fronts):
        rank[front] = r
        crowd[front] = crowding_distance(F[front])
    return rank, crowd, fronts


# -------------- Operators --------------

def sbx_crossover(
    p1: np.ndarray, p2: np.ndarray, lower: np.ndarray, upper: np.ndarray, eta: float, prob: float, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray]:
    """Bounded simulated binary crossover on a batch of parent pairs (rows)."""
    c1, c2 = p1.copy(), p2.copy()
    pairs, d = p1.shape
    do_pair = rng.random(pairs) < prob
    do_gene = (rng.random((pairs, d)) <= 0.5) & do_pair[:, None] & (np.abs(p1 - p2) > 1e-14)
    u = rng.random((pairs, d))
    swap = rng.random((pairs, d)) < 0.5

    y1, y2 = np.minimum(p1, p2), np.maximum(p1, p2)
    gap = np.where(do_gene, y2 - y1, 1.0)

    def betaq(beta: np.ndarray) -> np.ndarray:
        alpha = 2.0 - beta ** (-(eta + 1.0))
        return np.where(
            u <= 1.0 / alpha,
            (u * alpha) ** (1.0 / (eta + 1.0)),
            (1.0 / (2.0 - u * alpha)) ** (1.0 / (eta + 1.0)),
        )

    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        b1 = betaq(1.0 + 2.0 * (y1 - lower) / gap)
        b2 = betaq(1.0 + 2.0 * (upper - y2) / gap)
    o1 = np.clip(0.5 * ((y1 + y2) - b1 * (y2 - y1)), lower, upper)
    o2 = np.clip(0.5 * ((y1 + y2) + b2 * (y2 - y1)), lower, upper)
    o1, o2 = np.where(swap, o2, o1), np.where(swap, o1, o2)
    c1 = np.where(do_gene, o1, c1)
    c2 = np.where(do_gene, o2, c2)
    return c1, c2


def polynomial_mutation(
    X: np.ndarray, lower: np.ndarray, upper: np.ndarray, eta: float, prob: float, rng: np.random.Generator
) -> np.ndarray:
    span = upper - lower
    mask = rng.random(X.shape) < prob
    u = rng.random(X.shape)
    d1 = (X - lower) / span
    d2 = (upper - X) / span
    power = 1.0 / (eta + 1.0)
    low = (2.0 * u + (1.0 - 2.0 * u) * (1.0 - d1) ** (eta + 1.0)) ** power - 1.0
    high = 1.0 - (2.0 * (1.0 - u) + 2.0 * (u - 0.5) * (1.0 - d2) ** (eta + 1.0)) ** power
    delta = np.where(u < 0.5, low, high)
    return np.clip(np.where(mask, X + delta * span, X), lower, upper)


def _tournament(rank: np.ndarray, crowd: np.ndarray, count: int, rng: np.random.Generator) -> np.ndarray:
    a = rng.integers(len(rank), size=count)
    b = rng.integers(len(rank), size=count)
    a_wins = (rank[a] < rank[b]) | ((rank[a] == rank[b]) & (crowd[a] >= crowd[b]))
    return np.where(a_wins, a, b)


def _environmental_selection(F: np.ndarray, V: np.ndarray, size: int) -> np.ndarray:
    fronts = non_dominated_sort(F, V)
    chosen: list[int] = []
    for front in fronts:
        if len(chosen) + len(front) <= size:
            chosen.extend(front.tolist())
            continue
        crowd = crowding_distance(F[front])
        order = np.argsort(-crowd, kind="stable")
        chosen.extend(front[order[: size - len(chosen)]].tolist())
        break
    return np.array(chosen, dtype=np.int64)


@dataclass
class NsgaResult:
    X: np.ndarray
    F: np.ndarray
    V: np.ndarray
    fronts: list[np.ndarray]
    best_history: list[float] = field(default_factory=list)

    @property
    def first_front(self) -> np.ndarray:
        return self.fronts[0]


BatchEvaluator = Callable[[np.ndarray], tuple[np.ndarray, np.ndarray]]


def nsga2(
    evaluate_batch: BatchEvaluator,
    lower: np.ndarray,
    upper: np.ndarray,
    cfg: Optional[NsgaConfig] = None,
    *,
    logger: Optional[logging.Logger] = None,
) -> NsgaResult:
    """Generic constrained NSGA-II (maximization).

    ``evaluate_batch`` maps an (n, d) design matrix to (objectives (n, m),
    violations (n,)). Offspring are clipped into the bounds.
    """
    log = logger or logging.getLogger(__name__)
    cfg = cfg or NsgaConfig()
    lower = np.asarray(lower, dtype=np.float64)
    upper = np.asarray(upper, dtype=np.float64)
    d = lower.size
    pm = cfg.mutation_prob if cfg.mutation_prob is not None else 1.0 / d
    rng = np.random.default_rng(cfg.seed)

    X = rng.uniform(lower, upper, size=(cfg.population, d))
    F, V = evaluate_batch(X)
    F = np.atleast_2d(F).reshape(len(X), -1)
    history: list[float] = []

    for gen in range(cfg.generations):
        rank, crowd, _ = _rank_and_crowd(F, V)
        parents = _tournament(rank, crowd, cfg.population, rng)
        p1, p2 = X[parents[0::2]], X[parents[1::2]]
        c1, c2 = sbx_crossover(p1, p2, lower, upper, cfg.sbx_eta, cfg.crossover_prob, rng)
        children = polynomial_mutation(np.vstack([c1, c2]), lower, upper, cfg.mutation_eta, pm, rng)
        Fc, Vc = evaluate_batch(children)
        Fc = np.atleast_2d(Fc).reshape(len(children), -1)

        X_all = np.vstack([X, children])
        F_all = np.vstack([F, Fc])
        V_all = np.concatenate([V, Vc])
        keep = _environmental_selection(F_all, V_all, cfg.population)
        X, F, V = X_all[keep], F_all[keep], V_all[keep]

        feas = V <= 0
        best = float(F[feas, 0].max()) if feas.any() else float("-inf")
        history.append(best)
        if cfg.log_every and (gen + 1) % cfg.log_every == 0:
            log.info("nsga2 gen %d/%d: %d feasible, best f0 %.6g", gen + 1, cfg.generations, int(feas.sum()), best)

    _, _, fronts = _rank_and_crowd(F, V)
    return NsgaResult(X, F, V, fronts, history)


# -------------- Latent-space design --------------

@dataclass
class ParetoArchive:
    problem: DesignProblem
    individuals: list[Individual]

    def __len__(self) -> int:
        return len(self.individuals)

    def winner(self, objective: int = 0) -> Individual:
        """Best feasible individual on one objective, else the least violating."""
        feasible = [ind for ind in self.individuals if ind.feasible]
        if feasible:
            return max(feasible, key=lambda ind: ind.objective_values[objective])
        return min(self.individuals, key=lambda ind: ind.constraint_violation)


def nsga2_run(
    problem: DesignProblem,
    model: SurrogateModel,
    nsga_cfg: Optional[NsgaConfig] = None,
    uq_cfg: Optional[UqConfig] = None,
    *,
    logger: Optional[logging.Logger] = None,
) -> ParetoArchive:
    uq_cfg = uq_cfg or UqConfig()

    def evaluate_batch(Z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        pop = evaluate_population(Z, model, problem, uq_cfg)
        return np.stack([ind.objective_values for ind in pop]), np.array([ind.constraint_violation for ind in pop])

    result = nsga2(evaluate_batch, problem.bounds.lower, problem.bounds.upper, nsga_cfg, logger=logger)
    front = result.X[result.first_front]
    # duplicates collapse to one candidate
    _, unique = np.unique(front, axis=0, return_index=True)
    front = front[np.sort(unique)]
    individuals = evaluate_population(front, model, problem, uq_cfg)
    return ParetoArchive(problem, individuals)


def verify_archive(
    archive: ParetoArchive, material: MaterialSample, cfg: Optional[SolverConfig] = None
) -> list[Optional[ElasticProps]]:
    """FEA properties of every candidate structure (None when it has none)."""
    return [
        effective_properties(ind.grid, material, cfg) if ind.grid is not None else None
        for ind in archive.individuals
    ]


def beta_sweep(
    template: DesignProblem,
    betas: Sequence[float],
    model: SurrogateModel,
    material: MaterialSample,
    nsga_cfg: Optional[NsgaConfig] = None,
    uq_cfg: Optional[UqConfig] = None,
    solver_cfg: Optional[SolverConfig] = None,
) -> pd.DataFrame:
    """Robust single-objective design per beta with an FEA check of each winner."""
    if any(b < 0 for b in betas):
        raise ValueError("betas must be >= 0")
    selector = template.objectives[0].selector
    rows = []
    for beta in betas:
        problem = DesignProblem(
            [Objective(selector, beta)], template.vf_target, template.bounds,
            template.vf_tolerance, DesignMode.ROBUST, template.case,
        )
        best = nsga2_run(problem, model, nsga_cfg, uq_cfg).winner()
        fea = float("nan")
        if best.grid is not None:
            props = effective_properties(best.grid, material, solver_cfg)
            fea = {"E": props.E, "nu": props.nu, "K": bulk_modulus(props)}[selector.value]
        p = best.uq[selector.value] if best.uq else None
        rows.append(
            {
                "beta": beta,
                "pred_mu": p.mean if p else float("nan"),
                "pred_sigma_total": p.total if p else float("nan"),
                "epistemic": p.epistemic if p else float("nan"),
                "aleatoric": p.aleatoric if p else float("nan"),
                "vf": best.vf,
                "fea": fea,
            }
        )
        logger.info("beta %g: mu %.6g, sigma_total %.6g, vf %.4f", beta, rows[-1]["pred_mu"], rows[-1]["pred_sigma_total"], best.vf)
    return pd.DataFrame(rows)


@dataclass
class ParetoComparison:
    candidates: pd.DataFrame
    dominated_fraction: float
    median_cv: dict[str, dict[str, float]]


def pareto_compare(
    robust: ParetoArchive,
    deterministic: ParetoArchive,
    model: SurrogateModel,
    material: MaterialSample,
    uq_cfg: Optional[UqConfig] = None,
    solver_cfg: Optional[SolverConfig] = None,
    replicates: int = 8,
    beta: float = 5.0,
    seed: int = 0,
) -> ParetoComparison:
    """Material-noise CV of both archives and robust re-scoring of the deterministic one.

    Deterministic candidates are scored with the robust objectives at ``beta``;
    one counts as dominated when some robust candidate is at least as good on
    every objective.
    """
    from .metrics import coefficient_of_variation

    if not len(robust) or not len(deterministic):
        raise EmptyDataset("both archives must hold candidates")
    uq_cfg = uq_cfg or UqConfig()
    selectors = [o.selector for o in robust.problem.objectives]
    scoring = DesignProblem(
        [Objective(s, beta) for s in selectors], robust.problem.vf_target, robust.problem.bounds,
        robust.problem.vf_tolerance, DesignMode.ROBUST, robust.problem.case,
    )

    def scores(archive: ParetoArchive) -> np.ndarray:
        Z = np.stack([ind.z for ind in archive.individuals])
        return np.stack([ind.objective_values for ind in evaluate_population(Z, model, scoring, uq_cfg)])

    robust_scores, det_scores = scores(robust), scores(deterministic)
    dominated = [bool(np.any(np.all(robust_scores >= s, axis=1))) for s in det_scores]

    rows = []
    for label, archive, table in (("robust", robust, robust_scores), ("deterministic", deterministic, det_scores)):
        for i, ind in enumerate(archive.individuals):
            row = {"archive": label, "index": i, "vf": ind.vf, "cv_E": float("nan"), "cv_nu": float("nan")}
            if ind.grid is not None:
                study = true_aleatoric_study(ind.grid, material, replicates, seed=seed, cfg=solver_cfg)
                row["cv_E"] = coefficient_of_variation(study.samples["E"])
                row["cv_nu"] = coefficient_of_variation(study.samples["nu"])
                row["fea_E"] = study.mean["E"]
                row["fea_nu"] = study.mean["nu"]
            for k, s in enumerate(selectors):
                row[f"robust_{s.value}"] = float(table[i, k])
            rows.append(row)
    frame = pd.DataFrame(rows)
    medians = {
        label: {p: float(frame.loc[frame["archive"] == label, f"cv_{p}"].median()) for p in ("E", "nu")}
        for label in ("robust", "deterministic")
    }
    fraction = float(np.mean(dominated))
    logger.info("pareto compare: %.0f%% of deterministic candidates dominated", 100 * fraction)
    return ParetoComparison(frame, fraction, medians)


def write_archive(
    archive: ParetoArchive,
    out_dir: str | Path,
    fea: Optional[Sequence[Optional[ElasticProps]]] = None,
) -> Path:
    """Archive CSV plus one voxel file per candidate."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    robust = archive.problem.mode is DesignMode.ROBUST
    nan = float("nan")
    rows = []
    for i, ind in enumerate(archive.individuals):
        if ind.grid is not None:
            write_voxels(out_dir / f"candidate_{i:03d}.vox", ind.grid)
        means = ind.means or {}
        uq = ind.uq or {}
        props = fea[i] if fea is not None else None
        fea_k = nan
        if props is not None:
            try:
                fea_k = bulk_modulus(props)
            except IncompressibleLimit:
                pass
        rows.append(
            {
                "case": archive.problem.case,
                "beta": archive.problem.objectives[0].beta if robust else nan,
                "z_json": json.dumps([round(float(v), 12) for v in ind.z]),
                "pred_mu_E": means.get("E", nan),
                "pred_sigma_E": uq["E"].total if "E" in uq else nan,
                "pred_mu_nu": means.get("nu", nan),
                "pred_sigma_nu": uq["nu"].total if "nu" in uq else nan,
                "pred_mu_K": means.get("K", nan),
                "pred_sigma_K": uq["K"].total if "K" in uq else nan,
                "vf": ind.vf,
                "fea_E": props.E if props else nan,
                "fea_nu": props.nu if props else nan,
                "fea_K": fea_k,
            }
        )
    path = out_dir / "archive.csv"
    pd.DataFrame(rows, columns=ARCHIVE_COLUMNS).to_csv(path, index=False, lineterminator="\n")
    return path
