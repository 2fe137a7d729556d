"""Run configuration: pydantic models over the engine's dataclass configs.

A run starts from the chosen profile's defaults (``desk`` or ``paper``), deep
merges an optional TOML file over them and finally applies explicit
overrides from the command line.
"""
from __future__ import annotations

import hashlib
import json
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Any, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field

from src.engine.autodiff import LrSchedule
from src.engine.generators import FamilyMix, GeneratorConfig, MaterialSample
from src.engine.homogenizer import SolverConfig
from src.engine.model import ModelConfig
from src.engine.optimizer import NsgaConfig
from src.engine.training import DownselectSpec, PhaseSchedule, SplitSpec
from src.engine.uq import UqConfig

Profile = Literal["desk", "paper"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class PathsSection(_Section):
    dataset_dir: str = "data/dataset"
    checkpoint_dir: str = "data/checkpoints"
    results_dir: str = "results"


class GeneratorSection(_Section):
    edge_voxels: int = Field(16, ge=2, description="Full-cell edge in voxels (even)")
    vf_min: float = Field(0.05, gt=0, lt=1)
    vf_max: float = Field(0.4, gt=0, lt=1)
    count: int = Field(200, ge=0)
    max_attempts_factor: int = Field(20, ge=1)
    struts: float = Field(1 / 3, ge=0)
    levelsets: float = Field(1 / 3, ge=0)
    templates: float = Field(1 / 3, ge=0)


class MaterialSection(_Section):
    youngs_modulus: float = Field(68300.0, gt=0, description="Base E in MPa")
    poisson_ratio: float = Field(0.3, gt=-1, lt=0.5)
    std_factor: float = Field(0.01, ge=0, description="Material noise std as a fraction of the mean")
    noise_draws: int = Field(1, ge=1, description="FEA draws per unit when labeling")


class SolverSection(_Section):
    cg_tolerance: float = Field(1e-8, gt=0)
    max_iterations: Optional[int] = Field(None, ge=1)
    soft_void_stiffness: float = Field(1e-9, gt=0, lt=1)


class ModelSection(_Section):
    latent_dim: int = Field(16, ge=1)
    channels: list[int] = Field(default_factory=lambda: [16, 32])
    convs_per_block: int = Field(1, ge=1)
    encoder_hidden: list[int] = Field(default_factory=lambda: [64])
    decoder_hidden: list[int] = Field(default_factory=lambda: [64])
    final_channels: int = Field(8, ge=1)
    final_convs: int = Field(1, ge=1)
    mdn_hidden: list[int] = Field(default_factory=lambda: [256, 128])


class ScheduleSection(_Section):
    latent_dims: list[int] = Field(default_factory=lambda: [4, 8, 16])
    alpha2_ladder: list[float] = Field(default_factory=lambda: [1e-4, 1e-3, 1e-2])
    alpha3_ladder: list[float] = Field(default_factory=lambda: [1e-4, 1e-3, 1e-2])
    epochs_per_phase: int = Field(60, ge=1)
    patience: int = Field(10, ge=1)
    batch_size: int = Field(16, ge=1)
    learning_rate: float = Field(1e-3, gt=0)
    lr_decay: float = Field(0.995, gt=0, le=1)


class SplitSection(_Section):
    train: float = Field(0.7, ge=0, le=1)
    val: float = Field(0.2, ge=0, le=1)
    test: float = Field(0.1, ge=0, le=1)
    keep_fraction: float = Field(1.0, gt=0, le=1, description="Portion of positive-nu units kept")


class UqSection(_Section):
    n_samples: int = Field(80, ge=2)
    binarize_before_reencode: bool = True
    variance_mean_aleatoric: bool = False
    latent_std_scale: float = Field(1.0, ge=0)


class NsgaSection(_Section):
    population: int = Field(64, ge=4)
    generations: int = Field(100, ge=0)
    sbx_eta: float = Field(15.0, gt=0)
    mutation_eta: float = Field(20.0, gt=0)
    mutation_prob: Optional[float] = Field(None, gt=0, le=1)
    crossover_prob: float = Field(0.9, ge=0, le=1)


class DesignSection(_Section):
    beta: float = Field(5.0, ge=0)
    betas: list[float] = Field(default_factory=lambda: [0.5, 1.0, 5.0, 10.0, 50.0, 100.0])
    replicates: int = Field(8, ge=2, description="Material-noise FEA replicates for CV")


class RunConfig(_Section):
    profile: Profile = "desk"
    seed: int = 0
    workers: Optional[int] = Field(None, ge=1)
    paths: PathsSection = Field(default_factory=PathsSection)
    generator: GeneratorSection = Field(default_factory=GeneratorSection)
    material: MaterialSection = Field(default_factory=MaterialSection)
    solver: SolverSection = Field(default_factory=SolverSection)
    model: ModelSection = Field(default_factory=ModelSection)
    schedule: ScheduleSection = Field(default_factory=ScheduleSection)
    split: SplitSection = Field(default_factory=SplitSection)
    uq: UqSection = Field(default_factory=UqSection)
    nsga: NsgaSection = Field(default_factory=NsgaSection)
    design: DesignSection = Field(default_factory=DesignSection)

    # -------------- Engine configs --------------

    def generator_config(self) -> GeneratorConfig:
        g = self.generator
        return GeneratorConfig(
            edge_voxels=g.edge_voxels, vf_min=g.vf_min, vf_max=g.vf_max, seed=self.seed,
            count=g.count, max_attempts_factor=g.max_attempts_factor, workers=self.workers,
        )

    def family_mix(self) -> FamilyMix:
        g = self.generator
        total = g.struts + g.levelsets + g.templates
        return FamilyMix(g.struts / total, g.levelsets / total, g.templates / total)

    def base_material(self) -> MaterialSample:
        return MaterialSample(self.material.youngs_modulus, self.material.poisson_ratio)

    def solver_config(self) -> SolverConfig:
        return SolverConfig(**self.solver.model_dump())

    def network_config(self, deterministic: bool = False) -> ModelConfig:
        return ModelConfig(
            input_edge=self.generator.edge_voxels // 2,
            deterministic_head=deterministic,
            seed=self.seed,
            **self.model.model_dump(),
        )

    def phase_schedule(self) -> PhaseSchedule:
        s = self.schedule
        return PhaseSchedule(
            latent_dims=tuple(s.latent_dims),
            alpha2_ladder=tuple(s.alpha2_ladder),
            alpha3_ladder=tuple(s.alpha3_ladder),
            epochs_per_phase=s.epochs_per_phase,
            patience=s.patience,
            batch_size=s.batch_size,
            lr=LrSchedule(s.learning_rate, s.lr_decay),
            seed=self.seed,
        )

    def split_spec(self) -> SplitSpec:
        return SplitSpec(self.split.train, self.split.val, self.split.test, seed=self.seed)

    def downselect_spec(self) -> DownselectSpec:
        return DownselectSpec(self.split.keep_fraction, seed=self.seed)

    def uq_config(self) -> UqConfig:
        return UqConfig(seed=self.seed, **self.uq.model_dump())

    def nsga_config(self) -> NsgaConfig:
        return NsgaConfig(seed=self.seed, **self.nsga.model_dump())

    def config_hash(self) -> str:
        payload = json.dumps(self.model_dump(mode="json"), sort_keys=True).encode("utf-8")
        return hashlib.sha256(payload).hexdigest()


PROFILE_DEFAULTS: dict[str, dict[str, Any]] = {
    "desk": {},
    "paper": {
        "generator": {"edge_voxels": 48, "count": 46840},
        "material": {"noise_draws": 1},
        "model": {
            "latent_dim": 32,
            "channels": [32, 64, 96],
            "convs_per_block": 3,
            "encoder_hidden": [1000, 100],
            "decoder_hidden": [1000],
            "final_channels": 16,
            "final_convs": 2,
        },
        "schedule": {
            "latent_dims": [4, 16, 32, 48, 64],
            "alpha2_ladder": [5e-5, 1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1, 1.0],
            "alpha3_ladder": [1e-5, 1e-4, 1e-3, 1e-2, 1e-1, 1.0],
            "epochs_per_phase": 400,
        },
        "split": {"keep_fraction": 0.6},
    },
}


def deep_merge(base: dict[str, Any], override: dict[str, Any]) -> dict[str, Any]:
    out = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(
    path: str | Path | None = None,
    profile: Optional[str] = None,
    overrides: Optional[dict[str, Any]] = None,
) -> RunConfig:
    """Profile defaults, then the TOML file, then ``overrides``.

    ``profile`` wins over a ``profile`` key in the file.
    """
    data: dict[str, Any] = {}
    if path is not None:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    chosen = profile or data.get("profile", "desk")
    if chosen not in PROFILE_DEFAULTS:
        raise ValueError(f"unknown profile {chosen!r}")
    merged = deep_merge(PROFILE_DEFAULTS[chosen], data)
    merged = deep_merge(merged, overrides or {})
    merged["profile"] = chosen
    return RunConfig.model_validate(merged)
