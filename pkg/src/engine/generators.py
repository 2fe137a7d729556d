"""Procedural generators for cubic-symmetric metamaterial units.

Three families are produced, each on the eighth cell and mirrored into the
full unit so that the three mid-plane reflections hold exactly:

- strut lattices (octet, octahedral, bcc): voxels within a radius of the
  family's skeleton segments;
- level-set surfaces (gyroid, Schwarz P, diamond): super-level sets or shells
  of a periodic trigonometric field, one full period per eighth cell;
- templates: boolean compositions of slabs, bars, tubes and holes with
  parameters in [0, 1].

Template base shapes (all parameters 0):

- ``cross_plates``: three mid-plane plates, thickness 0.1 of the edge, no holes.
- ``frame``: bars along the twelve cell edges, width 0.1 of the edge once shared with
  the neighbouring cells, no corner nodes.
- ``hollow_tubes``: three axis-aligned tubes through the cell center, outer radius
  0.15 and wall 0.075 of the edge.
- ``cross_bars``: three axis-aligned square bars through the cell center,
  width 0.2 of the edge, no center node.
"""
from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Any, Union

import numpy as np
import pandas as pd

from .errors import DegenerateGeometry, MetaforgeError, NonPhysicalBase
from .voxel_core import EighthCell, VoxelGrid, mirror_eighth, volume_fraction
from .voxel_io import read_voxels, write_voxels
from .workers import worker_count

logger = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["id", "family", "spec_json", "edge_voxels", "volume_fraction", "voxel_path"]

MAX_REDRAWS = 100


class StrutFamily(str, Enum):
    OCTET = "octet"
    OCTAHEDRAL = "octahedral"
    BCC = "bcc"


class LevelSetFamily(str, Enum):
    GYROID = "gyroid"
    SCHWARZ_P = "schwarz_p"
    DIAMOND = "diamond"


class TemplateId(str, Enum):
    CROSS_PLATES = "cross_plates"
    FRAME = "frame"
    HOLLOW_TUBES = "hollow_tubes"
    CROSS_BARS = "cross_bars"


TEMPLATE_PARAMS: dict[TemplateId, tuple[str, ...]] = {
    TemplateId.CROSS_PLATES: ("thickness", "hole_radius"),
    TemplateId.FRAME: ("bar_width", "node_radius"),
    TemplateId.HOLLOW_TUBES: ("radius", "wall"),
    TemplateId.CROSS_BARS: ("bar_width", "node_size"),
}


@dataclass(frozen=True)
class StrutSpec:
    family: StrutFamily
    radius: float

    def __post_init__(self) -> None:
        object.__setattr__(self, "family", StrutFamily(self.family))
        if not self.radius > 0:
            raise ValueError(f"strut radius must be > 0, got {self.radius}")


@dataclass(frozen=True)
class LevelSetSpec:
    family: LevelSetFamily
    iso_level: float = 0.0
    shell: bool = False
    shell_thickness: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "family", LevelSetFamily(self.family))
        if self.shell_thickness < 0:
            raise ValueError("shell_thickness must be >= 0")
        if self.shell and self.shell_thickness <= 0:
            raise ValueError("shell variant needs shell_thickness > 0")


@dataclass(frozen=True)
class TemplateSpec:
    template_id: TemplateId
    params: tuple[float, ...]

    def __post_init__(self) -> None:
        tid = TemplateId(self.template_id)
        object.__setattr__(self, "template_id", tid)
        params = tuple(float(p) for p in self.params)
        object.__setattr__(self, "params", params)
        expected = len(TEMPLATE_PARAMS[tid])
        if len(params) != expected:
            raise ValueError(f"{tid.value} takes {expected} params, got {len(params)}")
        if any(not 0.0 <= p <= 1.0 for p in params):
            raise ValueError(f"template params must lie in [0, 1], got {params}")


UnitSpec = Union[StrutSpec, LevelSetSpec, TemplateSpec]


@dataclass(frozen=True)
class MaterialSample:
    youngs_modulus: float
    poisson_ratio: float

    def __post_init__(self) -> None:
        if not self.is_physical():
            raise NonPhysicalBase(
                f"E={self.youngs_modulus} MPa, nu={self.poisson_ratio} is not elastically stable"
            )

    def is_physical(self) -> bool:
        return _physical(self.youngs_modulus, self.poisson_ratio)


def _physical(e: float, nu: float) -> bool:
    return bool(np.isfinite(e) and np.isfinite(nu) and e > 0 and -1.0 < nu < 0.5)


ALUMINIUM = MaterialSample(youngs_modulus=68300.0, poisson_ratio=0.3)


@dataclass
class GeneratorConfig:
    edge_voxels: int = 16
    vf_min: float = 0.05
    vf_max: float = 0.4
    seed: int = 0
    count: int = 100
    max_attempts_factor: int = 20
    workers: int | None = None

    def __post_init__(self) -> None:
        if not 0 < self.vf_min < self.vf_max < 1:
            raise ValueError(f"need 0 < vf_min < vf_max < 1, got {self.vf_min}, {self.vf_max}")
        if self.edge_voxels < 2 or self.edge_voxels % 2:
            raise ValueError(f"edge_voxels must be even and >= 2, got {self.edge_voxels}")
        if self.count < 0:
            raise ValueError("count must be >= 0")


@dataclass
class FamilyMix:
    struts: float = 1 / 3
    levelsets: float = 1 / 3
    templates: float = 1 / 3

    def __post_init__(self) -> None:
        w = self.weights()
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError(f"family weights must be >= 0 and sum to 1, got {w.tolist()}")

    def weights(self) -> np.ndarray:
        return np.array([self.struts, self.levelsets, self.templates], dtype=np.float64)


# -------------- Struts --------------

_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=np.float64)
_FACE_CENTERS = np.array(
    [[0, .5, .5], [1, .5, .5], [.5, 0, .5], [.5, 1, .5], [.5, .5, 0], [.5, .5, 1]], dtype=np.float64
)


def _octahedral_segments() -> list[tuple[np.ndarray, np.ndarray]]:
    segs = []
    for a, b in combinations(range(6), 2):
        if a // 2 == b // 2:  # opposite faces
            continue
        segs.append((_FACE_CENTERS[a], _FACE_CENTERS[b]))
    return segs


def _face_diagonals() -> list[tuple[np.ndarray, np.ndarray]]:
    segs = []
    for axis in range(3):
        others = [ax for ax in range(3) if ax != axis]
        for level in (0.0, 1.0):
            for (u0, v0), (u1, v1) in (((0, 0), (1, 1)), ((1, 0), (0, 1))):
                p, q = np.zeros(3), np.zeros(3)
                p[axis] = q[axis] = level
                p[others], q[others] = (u0, v0), (u1, v1)
                segs.append((p, q))
    return segs


def skeleton(family: StrutFamily) -> np.ndarray:
    """Skeleton segments in unit-cell coordinates, shape (n, 2, 3)."""
    family = StrutFamily(family)
    if family is StrutFamily.BCC:
        segs = [(c, 1.0 - c) for c in _CORNERS if c[0] == 0]
    elif family is StrutFamily.OCTAHEDRAL:
        segs = _octahedral_segments()
    else:
        segs = _face_diagonals() + _octahedral_segments()
    return np.array([[p, q] for p, q in segs], dtype=np.float64)


def segment_distance(points: np.ndarray, segments: np.ndarray) -> np.ndarray:
    """Distance from each point (n, 3) to the nearest of the segments (m, 2, 3)."""
    a = segments[:, 0, :]
    ab = segments[:, 1, :] - a
    ap = points[:, None, :] - a[None, :, :]
    t = np.einsum("nmk,mk->nm", ap, ab) / np.einsum("mk,mk->m", ab, ab)
    t = np.clip(t, 0.0, 1.0)
    closest = a[None, :, :] + t[..., None] * ab[None, :, :]
    d = np.linalg.norm(points[:, None, :] - closest, axis=-1)
    return d.min(axis=1)


def _eighth_points(edge_voxels: int) -> np.ndarray:
    h = edge_voxels // 2
    c = (np.arange(h) + 0.5) / edge_voxels
    x, y, z = np.meshgrid(c, c, c, indexing="ij")
    return np.stack([x.ravel(), y.ravel(), z.ravel()], axis=1)


def _check_edge(edge_voxels: int) -> int:
    if edge_voxels < 2 or edge_voxels % 2:
        raise ValueError(f"edge_voxels must be even and >= 2, got {edge_voxels}")
    return edge_voxels // 2


def _finish(eighth: np.ndarray, what: str) -> VoxelGrid:
    grid = mirror_eighth(EighthCell(eighth.astype(np.float64), binary_flag=True))
    vf = volume_fraction(grid)
    if vf <= 0.0 or vf >= 1.0:
        raise DegenerateGeometry(f"{what} produced volume fraction {vf:g}")
    return grid


def generate_strut(spec: StrutSpec, edge_voxels: int) -> VoxelGrid:
    h = _check_edge(edge_voxels)
    if spec.radius >= edge_voxels / 2:
        raise ValueError(f"radius {spec.radius} must be < edge_voxels/2 = {edge_voxels / 2}")
    dist = segment_distance(_eighth_points(edge_voxels), skeleton(spec.family))
    solid = (dist <= spec.radius / edge_voxels).reshape(h, h, h)
    return _finish(solid, f"{spec.family.value} strut r={spec.radius:g}")


# -------------- Level sets --------------

def levelset_field(family: LevelSetFamily, x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Periodic structure-factor field with period 2*pi along each axis."""
    family = LevelSetFamily(family)
    if family is LevelSetFamily.GYROID:
        return np.sin(x) * np.cos(y) + np.sin(y) * np.cos(z) + np.sin(z) * np.cos(x)
    if family is LevelSetFamily.SCHWARZ_P:
        return np.cos(x) + np.cos(y) + np.cos(z)
    return (
        np.sin(x) * np.sin(y) * np.sin(z)
        + np.sin(x) * np.cos(y) * np.cos(z)
        + np.cos(x) * np.sin(y) * np.cos(z)
        + np.cos(x) * np.cos(y) * np.sin(z)
    )


def generate_levelset(spec: LevelSetSpec, edge_voxels: int) -> VoxelGrid:
    h = _check_edge(edge_voxels)
    theta = 2.0 * np.pi * (np.arange(h) + 0.5) / h
    x, y, z = np.meshgrid(theta, theta, theta, indexing="ij")
    f = levelset_field(spec.family, x, y, z)
    if spec.shell:
        solid = np.abs(f - spec.iso_level) < spec.shell_thickness
    else:
        solid = f > spec.iso_level
    kind = "shell" if spec.shell else "solid"
    return _finish(solid, f"{spec.family.value} {kind} iso={spec.iso_level:g}")


# -------------- Templates --------------

def _template_eighth(spec: TemplateSpec, h: int) -> np.ndarray:
    # u = 0 on the cell faces, u = 1 on the mid-planes
    c = (np.arange(h) + 0.5) / h
    u = np.stack(np.meshgrid(c, c, c, indexing="ij"))
    p = spec.params
    tid = spec.template_id
    pairs = [(0, 1, 2), (1, 0, 2), (2, 0, 1)]

    if tid is TemplateId.CROSS_PLATES:
        t = 0.1 + 0.3 * p[0]
        r_hole = 0.45 * p[1]
        solid = np.zeros((h, h, h), dtype=bool)
        for k, i, j in pairs:
            plate = u[k] > 1.0 - t
            hole = (u[i] - 0.5) ** 2 + (u[j] - 0.5) ** 2 < r_hole**2
            solid |= plate & ~hole
        return solid

    if tid is TemplateId.FRAME:
        w = 0.1 + 0.3 * p[0]
        solid = np.zeros((h, h, h), dtype=bool)
        for _, i, j in pairs:
            solid |= (u[i] < w) & (u[j] < w)
        if p[1] > 0:
            solid |= (u**2).sum(axis=0) < (0.6 * p[1]) ** 2
        return solid

    if tid is TemplateId.HOLLOW_TUBES:
        r_out = 0.3 + 0.4 * p[0]
        wall = 0.15 + 0.25 * p[1]
        solid = np.zeros((h, h, h), dtype=bool)
        for _, i, j in pairs:
            rho = np.sqrt((1.0 - u[i]) ** 2 + (1.0 - u[j]) ** 2)
            solid |= (rho < r_out) & (rho >= r_out - wall)
        return solid

    w = 0.2 + 0.3 * p[0]
    solid = np.zeros((h, h, h), dtype=bool)
    for _, i, j in pairs:
        solid |= (1.0 - u[i] < w) & (1.0 - u[j] < w)
    if p[1] > 0:
        solid |= (1.0 - u).max(axis=0) < 0.6 * p[1]
    return solid


def generate_template(spec: TemplateSpec, edge_voxels: int) -> VoxelGrid:
    h = _check_edge(edge_voxels)
    solid = _template_eighth(spec, h)
    return _finish(solid, f"template {spec.template_id.value} {spec.params}")


def generate(spec: UnitSpec, edge_voxels: int) -> VoxelGrid:
    if isinstance(spec, StrutSpec):
        return generate_strut(spec, edge_voxels)
    if isinstance(spec, LevelSetSpec):
        return generate_levelset(spec, edge_voxels)
    if isinstance(spec, TemplateSpec):
        return generate_template(spec, edge_voxels)
    raise TypeError(f"unknown unit spec {type(spec).__name__}")


def family_of(spec: UnitSpec) -> str:
    if isinstance(spec, StrutSpec):
        return "strut"
    if isinstance(spec, LevelSetSpec):
        return "levelset"
    return "template"


def spec_to_json(spec: UnitSpec) -> str:
    payload: dict[str, Any] = {"kind": family_of(spec), **asdict(spec)}
    for key, value in payload.items():
        if isinstance(value, Enum):
            payload[key] = value.value
        elif isinstance(value, tuple):
            payload[key] = list(value)
    return json.dumps(payload, sort_keys=True)


def spec_from_json(text: str) -> UnitSpec:
    payload = json.loads(text)
    kind = payload.pop("kind")
    if kind == "strut":
        return StrutSpec(**payload)
    if kind == "levelset":
        return LevelSetSpec(**payload)
    if kind == "template":
        return TemplateSpec(payload["template_id"], tuple(payload["params"]))
    raise ValueError(f"unknown unit kind {kind!r}")


# -------------- Materials --------------

def sample_material(base: MaterialSample, rng_seed: int | np.random.Generator, std_factor: float = 0.01) -> MaterialSample:
    """Draw (E, nu) around ``base`` with std ``std_factor`` times each base value."""
    if std_factor < 0:
        raise ValueError("std_factor must be >= 0")
    if std_factor == 0:
        return base
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    for _ in range(MAX_REDRAWS):
        e = rng.normal(base.youngs_modulus, std_factor * abs(base.youngs_modulus))
        nu = rng.normal(base.poisson_ratio, std_factor * abs(base.poisson_ratio))
        if _physical(e, nu):
            return MaterialSample(float(e), float(nu))
    raise NonPhysicalBase(f"no stable material drawn around {base} after {MAX_REDRAWS} redraws")


# -------------- Dataset --------------

_ISO_RANGES = {
    LevelSetFamily.GYROID: (0.3, 1.2),
    LevelSetFamily.SCHWARZ_P: (0.4, 2.0),
    LevelSetFamily.DIAMOND: (0.25, 1.1),
}


def random_spec(rng: np.random.Generator, edge_voxels: int, mix: FamilyMix) -> UnitSpec:
    kind = rng.choice(3, p=mix.weights())
    if kind == 0:
        family = list(StrutFamily)[rng.integers(3)]
        radius = rng.uniform(0.04, 0.14) * edge_voxels
        return StrutSpec(family, float(radius))
    if kind == 1:
        family = list(LevelSetFamily)[rng.integers(3)]
        if rng.random() < 0.5:
            return LevelSetSpec(family, float(rng.uniform(-0.5, 0.5)), True, float(rng.uniform(0.1, 0.5)))
        lo, hi = _ISO_RANGES[family]
        return LevelSetSpec(family, float(rng.uniform(lo, hi)))
    tid = list(TemplateId)[rng.integers(len(TemplateId))]
    params = tuple(float(v) for v in rng.uniform(0.0, 1.0, size=len(TEMPLATE_PARAMS[tid])))
    return TemplateSpec(tid, params)


@dataclass
class UnitResult:
    attempt: int
    spec: UnitSpec | None
    grid: VoxelGrid | None
    error: str | None = None


def _attempt(attempt: int, seed_seq: np.random.SeedSequence, edge_voxels: int, mix: FamilyMix) -> UnitResult:
    rng = np.random.default_rng(seed_seq)
    spec = None
    try:
        spec = random_spec(rng, edge_voxels, mix)
        return UnitResult(attempt, spec, generate(spec, edge_voxels))
    except (MetaforgeError, ValueError) as exc:
        return UnitResult(attempt, spec, None, f"{type(exc).__name__}: {exc}")


@dataclass
class DatasetManifest:
    """Manifest rows plus the directory their relative voxel paths resolve against."""

    frame: pd.DataFrame
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.frame)

    @classmethod
    def empty(cls, root: Path) -> "DatasetManifest":
        return cls(pd.DataFrame({c: pd.Series(dtype=object) for c in MANIFEST_COLUMNS}), Path(root))

    def grid(self, index: int) -> VoxelGrid:
        return read_voxels(self.root / self.frame.iloc[index]["voxel_path"])

    def write_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.frame.to_csv(path, index=False, lineterminator="\n")
        return path

    @classmethod
    def read_csv(cls, path: str | Path) -> "DatasetManifest":
        path = Path(path)
        frame = pd.read_csv(path, dtype={"id": str, "family": str, "spec_json": str, "voxel_path": str})
        missing = [c for c in MANIFEST_COLUMNS if c not in frame.columns]
        if missing:
            raise ValueError(f"{path} is missing manifest columns {missing}")
        return cls(frame, path.parent)


def build_dataset(
    config: GeneratorConfig,
    mix: FamilyMix | None = None,
    out_dir: str | Path = "dataset",
    logger: logging.Logger | None = None,
) -> DatasetManifest:
    """Generate ``config.count`` accepted units into ``out_dir``.

    Attempts are seeded from ``config.seed`` by index, so the accepted set and
    the manifest bytes depend only on the config. Units failing generation or
    the volume-fraction filter are logged and skipped.
    """
    log = logger or logging.getLogger(__name__)
    mix = mix or FamilyMix()
    out_dir = Path(out_dir)
    manifest = DatasetManifest.empty(out_dir)
    if config.count == 0:
        manifest.write_csv(out_dir / "manifest.csv")
        return manifest

    max_attempts = max(50, config.max_attempts_factor * config.count)
    seeds = np.random.SeedSequence(config.seed).spawn(max_attempts)
    workers = worker_count(config.workers)
    chunk = workers * 4
    rows: list[dict[str, Any]] = []
    skipped = rejected = 0

    with ThreadPoolExecutor(max_workers=workers) as pool:
        start = 0
        while len(rows) < config.count and start < max_attempts:
            stop = min(start + chunk, max_attempts)
            results = pool.map(
                lambda a: _attempt(a, seeds[a], config.edge_voxels, mix), range(start, stop)
            )
            for res in results:
                if len(rows) >= config.count:
                    break
                if res.grid is None:
                    skipped += 1
                    log.warning("unit attempt %d skipped: %s", res.attempt, res.error)
                    continue
                vf = volume_fraction(res.grid)
                if not config.vf_min <= vf <= config.vf_max:
                    rejected += 1
                    log.debug("unit attempt %d rejected: V_f=%.4f", res.attempt, vf)
                    continue
                unit_id = f"unit_{len(rows):05d}"
                rel = f"voxels/{unit_id}.vox"
                write_voxels(out_dir / rel, res.grid)
                rows.append(
                    {
                        "id": unit_id,
                        "family": family_of(res.spec),
                        "spec_json": spec_to_json(res.spec),
                        "edge_voxels": config.edge_voxels,
                        "volume_fraction": vf,
                        "voxel_path": rel,
                    }
                )
            start = stop

    if len(rows) < config.count:
        log.warning("dataset stopped at %d/%d units after %d attempts", len(rows), config.count, max_attempts)
    log.info("dataset: %d units written (%d skipped, %d outside V_f range)", len(rows), skipped, rejected)
    manifest = DatasetManifest(pd.DataFrame(rows, columns=MANIFEST_COLUMNS), out_dir)
    manifest.write_csv(out_dir / "manifest.csv")
    return manifest
