"""Periodic linear-elastic homogenization of voxel units.

Each voxel is a unit 8-node trilinear brick. Nodes are identified
periodically, so an l**3 grid carries l**3 nodes with three displacement
components each. For an imposed macro strain the solver finds the periodic
fluctuation field with a Jacobi-preconditioned conjugate gradient that never
assembles the global matrix; element contributions are gathered and
scattered with ``np.roll``.

Conventions: array axes 0, 1, 2 are x, y, z; Voigt order is
``[xx, yy, zz, yz, xz, xy]`` with engineering shear strains.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import EmptyStructure, IncompressibleLimit, InvalidSampleCount, MetaforgeError, NotConverged
from .generators import DatasetManifest, MaterialSample, sample_material
from .voxel_core import VoxelGrid, largest_component
from .voxel_io import read_voxels
from .workers import worker_count

logger = logging.getLogger(__name__)

# local node order of a brick: offsets (dx, dy, dz) from its lower corner
OFFSETS = np.array(
    [[0, 0, 0], [1, 0, 0], [1, 1, 0], [0, 1, 0], [0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]]
)

LABEL_COLUMNS = ["E_mean", "nu_mean", "G_mean", "E_std", "nu_std"]


@dataclass(frozen=True)
class ElasticProps:
    E: float
    nu: float
    G: float


@dataclass(frozen=True, eq=False)
class LoadCase:
    """Imposed macro strain (symmetric 3x3, components within [-1, 1])."""

    macro_strain: np.ndarray

    def __post_init__(self) -> None:
        eps = np.array(self.macro_strain, dtype=np.float64)
        if eps.shape != (3, 3):
            raise ValueError(f"macro strain must be 3x3, got {eps.shape}")
        if not np.allclose(eps, eps.T, atol=1e-14):
            raise ValueError("macro strain must be symmetric")
        if np.abs(eps).max() > 1.0:
            raise ValueError("macro strain components must be at most unit magnitude")
        eps.setflags(write=False)
        object.__setattr__(self, "macro_strain", eps)

    def voigt(self) -> np.ndarray:
        e = self.macro_strain
        return np.array([e[0, 0], e[1, 1], e[2, 2], 2 * e[1, 2], 2 * e[0, 2], 2 * e[0, 1]])

    @classmethod
    def from_voigt(cls, strain: Sequence[float]) -> "LoadCase":
        s = np.asarray(strain, dtype=np.float64)
        eps = np.array(
            [[s[0], s[5] / 2, s[4] / 2], [s[5] / 2, s[1], s[3] / 2], [s[4] / 2, s[3] / 2, s[2]]]
        )
        return cls(eps)

    @classmethod
    def axial(cls, axis: int) -> "LoadCase":
        s = np.zeros(6)
        s[axis] = 1.0
        return cls.from_voigt(s)

    @classmethod
    def shear(cls, i: int, j: int) -> "LoadCase":
        """Engineering shear strain gamma_ij = 1."""
        slot = {frozenset((1, 2)): 3, frozenset((0, 2)): 4, frozenset((0, 1)): 5}[frozenset((i, j))]
        s = np.zeros(6)
        s[slot] = 1.0
        return cls.from_voigt(s)


@dataclass
class SolverConfig:
    cg_tolerance: float = 1e-8
    max_iterations: int | None = None
    soft_void_stiffness: float = 1e-9

    def __post_init__(self) -> None:
        if not self.cg_tolerance > 0:
            raise ValueError("cg_tolerance must be > 0")
        if self.max_iterations is not None and self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not 0 < self.soft_void_stiffness < 1:
            raise ValueError("soft_void_stiffness is a fraction of base E in (0, 1)")

    def iteration_cap(self, n_dof: int) -> int:
        if self.max_iterations is not None:
            return self.max_iterations
        return max(int(10 * math.sqrt(n_dof)), 500)


@dataclass
class FieldSolution:
    periodic_displacements: np.ndarray  # (l, l, l, 3) node fluctuations
    converged: bool
    iterations: int
    relative_residual: float = 0.0
    pinned_node: int = 0
    average_stress: np.ndarray | None = None


def isotropic_stiffness(E: float, nu: float) -> np.ndarray:
    lam = E * nu / ((1 + nu) * (1 - 2 * nu))
    mu = E / (2 * (1 + nu))
    C = np.zeros((6, 6))
    C[:3, :3] = lam
    C[np.arange(3), np.arange(3)] = lam + 2 * mu
    C[np.arange(3, 6), np.arange(3, 6)] = mu
    return C


def _strain_displacement(xi: np.ndarray) -> np.ndarray:
    B = np.zeros((6, 24))
    for a, (dx, dy, dz) in enumerate(OFFSETS):
        f = [xi[k] if d else 1.0 - xi[k] for k, d in enumerate((dx, dy, dz))]
        g = [1.0 if d else -1.0 for d in (dx, dy, dz)]
        bx, by, bz = g[0] * f[1] * f[2], f[0] * g[1] * f[2], f[0] * f[1] * g[2]
        c = 3 * a
        B[0, c], B[1, c + 1], B[2, c + 2] = bx, by, bz
        B[3, c + 1], B[3, c + 2] = bz, by
        B[4, c], B[4, c + 2] = bz, bx
        B[5, c], B[5, c + 1] = by, bx
    return B


@lru_cache(maxsize=16)
def element_matrices(nu: float) -> tuple[np.ndarray, np.ndarray]:
    """Unit-modulus brick stiffness ``Ke`` (24x24) and strain coupling ``Fe`` (24x6).

    ``Fe = integral of B^T C`` so the element load for macro strain ``e`` is
    ``-E * Fe @ e`` and the element stress average is ``E * (C e + Fe^T u_e)``.
    """
    C = isotropic_stiffness(1.0, nu)
    gp = np.array([0.5 - 0.5 / math.sqrt(3), 0.5 + 0.5 / math.sqrt(3)])
    Ke = np.zeros((24, 24))
    Fe = np.zeros((24, 6))
    for x in gp:
        for y in gp:
            for z in gp:
                B = _strain_displacement(np.array([x, y, z]))
                Ke += 0.125 * B.T @ C @ B
                Fe += 0.125 * B.T @ C
    Ke.setflags(write=False)
    Fe.setflags(write=False)
    return Ke, Fe


def _gather(u: np.ndarray) -> np.ndarray:
    return np.concatenate(
        [np.roll(u, shift=tuple(-OFFSETS[a]), axis=(0, 1, 2)) for a in range(8)], axis=-1
    )


def _scatter(fe: np.ndarray) -> np.ndarray:
    out = np.zeros(fe.shape[:3] + (3,))
    for a in range(8):
        out += np.roll(fe[..., 3 * a : 3 * a + 3], shift=tuple(OFFSETS[a]), axis=(0, 1, 2))
    return out


class PeriodicOperator:
    """Matrix-free periodic stiffness operator for a per-voxel modulus field."""

    def __init__(self, moduli: np.ndarray, nu: float):
        self.moduli = np.asarray(moduli, dtype=np.float64)
        if self.moduli.ndim != 3 or len(set(self.moduli.shape)) != 1:
            raise ValueError(f"moduli must be a cube, got {self.moduli.shape}")
        self.nu = float(nu)
        self.Ke, self.Fe = element_matrices(self.nu)
        self.C0 = isotropic_stiffness(1.0, self.nu)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.moduli.shape  # type: ignore[return-value]

    def apply(self, u: np.ndarray) -> np.ndarray:
        return _scatter(self.moduli[..., None] * (_gather(u) @ self.Ke))

    def diagonal(self) -> np.ndarray:
        kd = np.diag(self.Ke).reshape(8, 3)
        out = np.zeros(self.shape + (3,))
        for a in range(8):
            out += np.roll(self.moduli[..., None] * kd[a], shift=tuple(OFFSETS[a]), axis=(0, 1, 2))
        return out

    def element_load(self, strain: np.ndarray) -> np.ndarray:
        return -self.moduli[..., None] * (self.Fe @ strain)

    def rhs(self, strain: np.ndarray) -> np.ndarray:
        return _scatter(self.element_load(strain))

    def average_stress(self, u: np.ndarray, strain: np.ndarray) -> np.ndarray:
        local = self.C0 @ strain + _gather(u) @ self.Fe
        return (self.moduli[..., None] * local).reshape(-1, 6).mean(axis=0)


def _pcg(
    op: PeriodicOperator,
    b: np.ndarray,
    pin: tuple[int, int, int],
    tol: float,
    max_iter: int,
    load_scale: float,
) -> tuple[np.ndarray, bool, int, float]:
    x = np.zeros_like(b)
    b = b.copy()
    b[pin] = 0.0
    b_norm = float(np.linalg.norm(b))
    if b_norm <= 1e-12 * load_scale:
        return x, True, 0, 0.0

    diag = op.diagonal()
    diag[pin] = 1.0

    def apply(v: np.ndarray) -> np.ndarray:
        out = op.apply(v)
        out[pin] = 0.0
        return out

    r = b.copy()
    z = r / diag
    p = z.copy()
    rz = float(np.vdot(r, z))
    rel = 1.0
    for it in range(1, max_iter + 1):
        Ap = apply(p)
        alpha = rz / float(np.vdot(p, Ap))
        x += alpha * p
        r -= alpha * Ap
        rel = float(np.linalg.norm(r)) / b_norm
        if rel <= tol:
            # confirm against the true residual before accepting
            r = b - apply(x)
            rel = float(np.linalg.norm(r)) / b_norm
            if rel <= tol:
                return x, True, it, rel
            z = r / diag
            p = z.copy()
            rz = float(np.vdot(r, z))
            continue
        z = r / diag
        rz_new = float(np.vdot(r, z))
        p = z + (rz_new / rz) * p
        rz = rz_new
        if not np.isfinite(rel):
            break
    return x, False, max_iter, rel


def _pin_node(moduli: np.ndarray) -> tuple[int, int, int]:
    """First node touching a stiffest element."""
    stiff = moduli >= moduli.max()
    touched = np.zeros_like(stiff)
    for a in range(8):
        touched |= np.roll(stiff, shift=tuple(OFFSETS[a]), axis=(0, 1, 2))
    flat = int(np.flatnonzero(touched.reshape(-1))[0])
    return tuple(int(i) for i in np.unravel_index(flat, moduli.shape))  # type: ignore[return-value]


def solve_moduli(
    moduli: np.ndarray, nu: float, case: LoadCase, cfg: SolverConfig | None = None
) -> FieldSolution:
    """Solve one macro-strain case for an arbitrary positive modulus field."""
    cfg = cfg or SolverConfig()
    op = PeriodicOperator(moduli, nu)
    if op.moduli.min() <= 0:
        raise ValueError("moduli must be strictly positive")
    strain = case.voigt()
    n_dof = 3 * op.moduli.size
    pin = _pin_node(op.moduli)
    load_scale = float(np.linalg.norm(op.element_load(strain))) + 1e-300
    u, converged, iterations, rel = _pcg(
        op, op.rhs(strain), pin, cfg.cg_tolerance, cfg.iteration_cap(n_dof), load_scale
    )
    logger.debug("cg: %d iterations, relative residual %.3e (n_dof=%d)", iterations, rel, n_dof)
    if not converged:
        raise NotConverged(
            f"CG stopped after {iterations} iterations at relative residual {rel:.3e} "
            f"(tolerance {cfg.cg_tolerance:g})"
        )
    pinned = int(np.ravel_multi_index(pin, op.shape))
    return FieldSolution(u, True, iterations, rel, pinned, op.average_stress(u, strain))


def moduli_field(grid: VoxelGrid, material: MaterialSample, cfg: SolverConfig | None = None) -> np.ndarray:
    cfg = cfg or SolverConfig()
    if not grid.binary_flag:
        raise ValueError("homogenization needs a binary grid; binarize first")
    if not grid.occupancy.any():
        raise EmptyStructure("grid holds no solid voxel")
    void = cfg.soft_void_stiffness
    return material.youngs_modulus * (void + grid.occupancy * (1.0 - void))


def solve_case(
    grid: VoxelGrid, material: MaterialSample, case: LoadCase, cfg: SolverConfig | None = None
) -> FieldSolution:
    return solve_moduli(moduli_field(grid, material, cfg), material.poisson_ratio, case, cfg)


def homogenized_stiffness(
    moduli: np.ndarray,
    nu: float,
    strains: Sequence[Sequence[float]],
    cfg: SolverConfig | None = None,
) -> np.ndarray:
    """Averaged-stress columns (6, k) for the given Voigt macro strains."""
    cols = [solve_moduli(moduli, nu, LoadCase.from_voigt(s), cfg).average_stress for s in strains]
    return np.stack(cols, axis=1)


def _props_from_columns(columns: np.ndarray) -> ElasticProps:
    # normal block from the three axial cases, symmetrized against solver noise
    normal = columns[:3, :3]
    S = np.linalg.inv(0.5 * (normal + normal.T))
    E = 1.0 / S[0, 0]
    nu = -S[1, 0] / S[0, 0]
    G = columns[5, 3]
    return ElasticProps(float(E), float(nu), float(G))


_CASES = (
    (1.0, 0.0, 0.0, 0.0, 0.0, 0.0),
    (0.0, 1.0, 0.0, 0.0, 0.0, 0.0),
    (0.0, 0.0, 1.0, 0.0, 0.0, 0.0),
    (0.0, 0.0, 0.0, 0.0, 0.0, 1.0),
)


def effective_from_moduli(moduli: np.ndarray, nu: float, cfg: SolverConfig | None = None) -> ElasticProps:
    return _props_from_columns(homogenized_stiffness(moduli, nu, _CASES, cfg))


def effective_properties(
    grid: VoxelGrid, material: MaterialSample, cfg: SolverConfig | None = None
) -> ElasticProps:
    """Effective E, nu and G from the three axial cases and the xy shear case.

    E and nu are the x-direction uniaxial-stress values read from the inverted
    normal stiffness block (E = 1/S11, nu = -S21/S11), so no symmetry between
    the y and z axes is assumed. G is averaged xy shear stress over applied
    engineering shear strain.
    """
    return effective_from_moduli(moduli_field(grid, material, cfg), material.poisson_ratio, cfg)


def bulk_modulus(props: ElasticProps) -> float:
    denom = 1.0 - 2.0 * props.nu
    if denom <= 1e-9:
        raise IncompressibleLimit(f"nu={props.nu} leaves no finite bulk modulus")
    return props.E / (3.0 * denom)


@dataclass
class AleatoricStudy:
    n: int
    mean: dict[str, float]
    std: dict[str, float]
    samples: dict[str, list[float]]


def true_aleatoric_study(
    grid: VoxelGrid,
    base: MaterialSample,
    n: int,
    seed: int = 0,
    cfg: SolverConfig | None = None,
    std_factor: float = 0.01,
    seeds: Sequence[int] | None = None,
) -> AleatoricStudy:
    """FEA spread of one structure under ``n`` sampled base materials.

    ``seeds`` overrides the per-draw seeds derived from ``seed``.
    """
    if n < 2:
        raise InvalidSampleCount(f"need at least 2 material draws, got {n}")
    if seeds is None:
        draw_seeds: list = np.random.SeedSequence(seed).spawn(n)
    else:
        if len(seeds) != n:
            raise ValueError(f"got {len(seeds)} seeds for {n} draws")
        draw_seeds = list(seeds)
    rows = []
    for s in draw_seeds:
        material = sample_material(base, np.random.default_rng(s), std_factor)
        props = effective_properties(grid, material, cfg)
        rows.append((props.E, props.nu, props.G, bulk_modulus(props)))
    values = np.array(rows)
    names = ("E", "nu", "G", "K")
    mean = dict(zip(names, values.mean(axis=0).tolist()))
    std = dict(zip(names, values.std(axis=0, ddof=1).tolist()))
    samples = {name: values[:, i].tolist() for i, name in enumerate(names)}
    return AleatoricStudy(n, mean, std, samples)


def _label_unit(
    grid: VoxelGrid,
    base: MaterialSample,
    n_draws: int,
    seed_seq: np.random.SeedSequence,
    cfg: SolverConfig,
    std_factor: float = 0.01,
) -> dict[str, float]:
    cleaned, removed = largest_component(grid)
    if removed:
        logger.debug("labeling: dropped %d floating voxels", removed)
    rng = np.random.default_rng(seed_seq)
    props = [effective_properties(cleaned, sample_material(base, rng, std_factor), cfg) for _ in range(n_draws)]
    E = np.array([p.E for p in props])
    nu = np.array([p.nu for p in props])
    G = np.array([p.G for p in props])
    ddof = 1 if n_draws > 1 else 0
    return {
        "E_mean": float(E.mean()),
        "nu_mean": float(nu.mean()),
        "G_mean": float(G.mean()),
        "E_std": float(E.std(ddof=ddof)),
        "nu_std": float(nu.std(ddof=ddof)),
    }


def label_manifest(
    manifest: DatasetManifest,
    base: MaterialSample,
    n_draws: int = 1,
    cfg: SolverConfig | None = None,
    seed: int = 0,
    workers: int | None = None,
    logger: logging.Logger | None = None,
    std_factor: float = 0.01,
) -> pd.DataFrame:
    """Label every manifest unit with FEA statistics over ``n_draws`` materials.

    Rows whose voxel file is missing or whose solve fails are logged and left
    out of the result.
    """
    log = logger or logging.getLogger(__name__)
    if n_draws < 1:
        raise InvalidSampleCount("n_draws must be >= 1")
    cfg = cfg or SolverConfig()
    seeds = np.random.SeedSequence(seed).spawn(max(len(manifest), 1))

    def work(i: int) -> dict[str, float] | None:
        row = manifest.frame.iloc[i]
        path = manifest.root / row["voxel_path"]
        if not path.exists():
            log.warning("unit %s: voxel file %s missing, skipped", row["id"], path)
            return None
        try:
            return _label_unit(read_voxels(path), base, n_draws, seeds[i], cfg, std_factor)
        except MetaforgeError:
            log.exception("unit %s: labeling failed, skipped", row["id"])
            return None

    with ThreadPoolExecutor(max_workers=worker_count(workers)) as pool:
        labels = list(pool.map(work, range(len(manifest))))

    keep = [i for i, lab in enumerate(labels) if lab is not None]
    frame = manifest.frame.iloc[keep].reset_index(drop=True).copy()
    label_frame = pd.DataFrame([labels[i] for i in keep], columns=LABEL_COLUMNS)
    out = pd.concat([frame, label_frame], axis=1)
    log.info("labeled %d/%d units with %d material draw(s) each", len(out), len(manifest), n_draws)
    return out
