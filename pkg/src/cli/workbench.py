"""Command-line workbench driving every pipeline stage.

Each command resolves a :class:`RunConfig`, writes its outputs into
``<results_dir>/<command>-<run_id>/`` and appends a run record to
``<results_dir>/records.jsonl``. Run ids hash the command, its arguments,
the resolved config and the bytes of its input files, so identical reruns
land in the same directory with identical outputs.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import logging.config
import os
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Optional, Sequence

import numpy as np
import pandas as pd

from src.engine.errors import MetaforgeError
from src.engine.generators import DatasetManifest, build_dataset
from src.engine.homogenizer import label_manifest
from src.engine.metrics import evaluate_split, label_range, log_reports, write_evaluation
from src.engine.model import Model, load_checkpoint, save_checkpoint, slerp
from src.engine.optimizer import (
    DesignMode,
    beta_sweep,
    case_problem,
    latent_bounds,
    nsga2_run,
    pareto_compare,
    verify_archive,
    write_archive,
)
from src.engine.training import (
    DownselectSpec,
    SplitSpec,
    Trainer,
    TrainingData,
    downselect,
    load_arrays,
    split_dataset,
    write_ledger,
)
from src.engine.uq import convergence_sweep, predict_with_uncertainty, uq_audit
from src.engine.voxel_core import binarize, extract_eighth, mirror_eighth, volume_fraction
from src.engine.voxel_io import read_voxels, write_voxels

from .config import RunConfig, load_config

logger = logging.getLogger(__name__)

LOG_CONFIG: dict[str, Any] = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "standard": {"format": "%(asctime)s %(levelname)s %(name)s: %(message)s"}
    },
    "handlers": {
        "console": {"class": "logging.StreamHandler", "formatter": "standard", "stream": "ext://sys.stdout"}
    },
    "root": {"handlers": ["console"], "level": "INFO"},
}

ENCODE_BATCH = 64


class WarningCounter(logging.Handler):
    """Counts WARNING-and-above records emitted during a command."""

    def __init__(self) -> None:
        super().__init__(level=logging.WARNING)
        self.count = 0

    def emit(self, record: logging.LogRecord) -> None:
        self.count += 1


@dataclass
class RunRecord:
    command: str
    run_id: str
    config_hash: str
    input_hash: str
    started: str
    finished: str = ""
    outputs: list[str] = field(default_factory=list)


@dataclass
class RunContext:
    args: argparse.Namespace
    config: RunConfig
    run_dir: Path
    record: RunRecord
    log: logging.Logger

    def output(self, name: str) -> Path:
        path = self.run_dir / name
        self.record.outputs.append(path.as_posix())
        return path


# -------------- Helpers --------------

def hash_inputs(paths: Sequence[Path]) -> str:
    digest = hashlib.sha256()
    for path in sorted(paths):
        digest.update(path.name.encode("utf-8"))
        digest.update(path.read_bytes())
    return digest.hexdigest()


def _input_paths(args: argparse.Namespace) -> list[Path]:
    paths: list[Path] = []
    for name in ("manifest", "data"):
        value = getattr(args, name, None)
        if value:
            paths.append(Path(value))
    checkpoint = getattr(args, "checkpoint", None)
    if checkpoint:
        stem = Path(checkpoint)
        paths += [stem.with_suffix(".params"), stem.with_suffix(".json")]
    return paths


def _public_args(args: argparse.Namespace) -> dict[str, Any]:
    skip = {"func", "verbose", "config", "results_dir"}
    return {k: str(v) for k, v in sorted(vars(args).items()) if k not in skip}


def run_id_for(command: str, args: argparse.Namespace, config: RunConfig, input_hash: str) -> str:
    payload = json.dumps(
        {"command": command, "args": _public_args(args), "config": config.config_hash(), "inputs": input_hash},
        sort_keys=True,
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:12]


def _rows(manifest: DatasetManifest, ids: Sequence[str]) -> pd.DataFrame:
    frame = manifest.frame.set_index("id", drop=False)
    missing = [i for i in ids if i not in frame.index]
    if missing:
        raise ValueError(f"unit ids not in {manifest.root}: {missing}")
    return frame.loc[list(ids)]


def _load_grid(manifest: DatasetManifest, unit_id: str):
    row = _rows(manifest, [unit_id]).iloc[0]
    return read_voxels(manifest.root / row["voxel_path"])


def _encode_manifest(model: Model, manifest: DatasetManifest) -> tuple[list[str], np.ndarray]:
    ids, cells = [], []
    for row in manifest.frame.itertuples(index=False):
        path = manifest.root / row.voxel_path
        if not path.exists():
            logger.warning("unit %s: voxel file %s missing, skipped", row.id, path)
            continue
        ids.append(row.id)
        cells.append(extract_eighth(read_voxels(path)).occupancy)
    if not cells:
        return ids, np.zeros((0, model.config.latent_dim))
    stacked = np.stack(cells)
    means = [model.encode(stacked[i : i + ENCODE_BATCH]).mean for i in range(0, len(stacked), ENCODE_BATCH)]
    return ids, np.concatenate(means)


def _splits(frame: pd.DataFrame, split: SplitSpec, keep: DownselectSpec) -> dict[str, pd.DataFrame]:
    train, val, test = split_dataset(downselect(frame, keep), split)
    return {"train": train, "val": val, "test": test}


def _sidecar_splits(frame: pd.DataFrame, sidecar: dict[str, Any]) -> dict[str, pd.DataFrame]:
    m = sidecar["metrics"]
    return _splits(frame, SplitSpec(*m["split"], seed=m["seed"]), DownselectSpec(m["keep_fraction"], seed=m["seed"]))


# -------------- Commands --------------

def cmd_env(ctx: RunContext) -> None:
    from importlib.metadata import PackageNotFoundError, version

    print("Python:", sys.version)
    for package in ("numpy", "scipy", "pandas", "pydantic"):
        try:
            print(f"{package}:", version(package))
        except PackageNotFoundError as e:
            print(f"{package}: not installed -", e)
    print("METAFORGE_THREADS:", os.environ.get("METAFORGE_THREADS", "(unset)"))


def cmd_gen_data(ctx: RunContext) -> None:
    manifest = build_dataset(ctx.config.generator_config(), ctx.config.family_mix(), ctx.run_dir, logger=ctx.log)
    ctx.record.outputs.append((ctx.run_dir / "manifest.csv").as_posix())
    ctx.log.info("gen-data: %d units in %s", len(manifest), ctx.run_dir)


def cmd_simulate(ctx: RunContext) -> None:
    cfg = ctx.config
    manifest = DatasetManifest.read_csv(ctx.args.manifest)
    labeled = label_manifest(
        manifest,
        cfg.base_material(),
        n_draws=cfg.material.noise_draws,
        cfg=cfg.solver_config(),
        seed=cfg.seed,
        workers=cfg.workers,
        logger=ctx.log,
        std_factor=cfg.material.std_factor,
    )
    # voxel paths stay relative, now to the run directory
    labeled["voxel_path"] = [
        Path(os.path.relpath((manifest.root / p).resolve(), ctx.run_dir.resolve())).as_posix()
        for p in labeled["voxel_path"]
    ]
    DatasetManifest(labeled, ctx.run_dir).write_csv(ctx.output("labeled.csv"))


def cmd_train(ctx: RunContext) -> None:
    cfg, args = ctx.config, ctx.args
    manifest = DatasetManifest.read_csv(args.data)
    parts = _splits(manifest.frame, cfg.split_spec(), cfg.downselect_spec())
    train_x, train_y = load_arrays(parts["train"], manifest.root, ctx.log)
    val_x, val_y = load_arrays(parts["val"], manifest.root, ctx.log)
    trainer = Trainer(TrainingData(train_x, train_y, val_x, val_y), cfg.phase_schedule(), logger=ctx.log)
    base = cfg.network_config(deterministic=args.deterministic)
    result = trainer.progressive_schedule(base)

    final = result.rungs[-1]
    metrics = {
        "seed": cfg.seed,
        "split": [cfg.split.train, cfg.split.val, cfg.split.test],
        "keep_fraction": cfg.split.keep_fraction,
        "latent_dim": result.latent_dim,
        "step1_relative_errors": {str(k): v for k, v in result.step1_relative_errors.items()},
        "val": dict(final.report.best.val),
        "n_train": int(len(train_x)),
        "n_val": int(len(val_x)),
    }
    save_checkpoint(result.model, ctx.output("model"), result.weights, "step3", final.report.best_epoch, metrics)
    write_ledger(result, ctx.output("ledger.csv"))

    if args.compare_scratch:
        report = trainer.compare_from_scratch(base, result.weights)
        payload = asdict(report) | {"time_ratio": report.time_ratio}
        ctx.output("comparison.json").write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
        ctx.log.info(
            "val recon: schedule %.5f vs scratch %.5f", report.schedule["recon"], report.scratch["recon"]
        )


def cmd_evaluate(ctx: RunContext) -> None:
    args = ctx.args
    model, sidecar = load_checkpoint(args.checkpoint)
    manifest = DatasetManifest.read_csv(args.data)
    parts = _sidecar_splits(manifest.frame, sidecar)
    arrays = {name: load_arrays(frame, manifest.root, ctx.log) for name, frame in parts.items() if len(frame)}
    if "train" not in arrays or "val" not in arrays:
        raise ValueError("evaluation needs non-empty train and validation splits for the label range")
    lrange = label_range(arrays["train"][1], arrays["val"][1])
    chosen = list(arrays) if args.split == "all" else [args.split]

    reports = {}
    for name in chosen:
        if name not in arrays:
            raise ValueError(f"split {name!r} is empty")
        cells, labels = arrays[name]
        reports[name] = evaluate_split(model, cells, labels, lrange)
        log_reports(reports[name], name, ctx.log)
    write_evaluation(reports, ctx.output("evaluation.csv"))

    if args.audit:
        frame = parts[chosen[-1]].head(args.audit)
        grids = [read_voxels(manifest.root / p) for p in frame["voxel_path"]]
        audit = uq_audit(grids, model, ctx.config.base_material(), ctx.config.uq_config(),
                         n_fea=ctx.config.design.replicates, solver_cfg=ctx.config.solver_config())
        audit.insert(0, "id", frame["id"].to_list())
        audit.to_csv(ctx.output("audit.csv"), index=False, lineterminator="\n")


def cmd_encode(ctx: RunContext) -> None:
    model, _ = load_checkpoint(ctx.args.checkpoint)
    ids, latents = _encode_manifest(model, DatasetManifest.read_csv(ctx.args.data))
    frame = pd.DataFrame(latents, columns=[f"z{i}" for i in range(model.config.latent_dim)])
    frame.insert(0, "id", ids)
    frame.to_csv(ctx.output("latents.csv"), index=False, lineterminator="\n")


def cmd_interp(ctx: RunContext) -> None:
    args = ctx.args
    if args.steps < 2:
        raise ValueError("interp needs --steps >= 2")
    model, _ = load_checkpoint(args.checkpoint)
    manifest = DatasetManifest.read_csv(args.data)
    z1 = model.encode(extract_eighth(_load_grid(manifest, args.id1))).mean
    z2 = model.encode(extract_eighth(_load_grid(manifest, args.id2))).mean
    rows = []
    for k, t in enumerate(np.linspace(0.0, 1.0, args.steps)):
        eighth = binarize(model.decode(slerp(z1, z2, float(t))))
        grid = mirror_eighth(eighth)
        write_voxels(ctx.output(f"step_{k:02d}.vox"), grid)
        rows.append({"step": k, "t": float(t), "vf": volume_fraction(grid)})
    pd.DataFrame(rows).to_csv(ctx.output("interp.csv"), index=False, lineterminator="\n")


def cmd_design(ctx: RunContext) -> None:
    cfg, args = ctx.config, ctx.args
    model, _ = load_checkpoint(args.checkpoint)
    _, latents = _encode_manifest(model, DatasetManifest.read_csv(args.data))
    bounds = latent_bounds(latents)
    beta = cfg.design.beta if args.beta is None else args.beta
    problem = case_problem(args.case, bounds, beta, args.vf, args.mode)
    nsga_cfg, uq_cfg, solver_cfg = cfg.nsga_config(), cfg.uq_config(), cfg.solver_config()
    material = cfg.base_material()

    if args.sweep:
        table = beta_sweep(problem, cfg.design.betas, model, material, nsga_cfg, uq_cfg, solver_cfg)
        table.to_csv(ctx.output("beta_sweep.csv"), index=False, lineterminator="\n")
        return

    archive = nsga2_run(problem, model, nsga_cfg, uq_cfg, logger=ctx.log)
    fea = verify_archive(archive, material, solver_cfg) if args.verify else None
    write_archive(archive, ctx.run_dir, fea)
    ctx.record.outputs.append((ctx.run_dir / "archive.csv").as_posix())
    ctx.log.info("design %s (%s): %d candidates", args.case, problem.mode.value, len(archive))

    if args.compare:
        other_mode = DesignMode.DETERMINISTIC if problem.mode is DesignMode.ROBUST else DesignMode.ROBUST
        other = nsga2_run(case_problem(args.case, bounds, beta, args.vf, other_mode), model, nsga_cfg, uq_cfg, logger=ctx.log)
        robust, det = (archive, other) if problem.mode is DesignMode.ROBUST else (other, archive)
        report = pareto_compare(robust, det, model, material, uq_cfg, solver_cfg, cfg.design.replicates, beta, cfg.seed)
        report.candidates.to_csv(ctx.output("compare.csv"), index=False, lineterminator="\n")
        summary = {"dominated_fraction": report.dominated_fraction, "median_cv": report.median_cv}
        ctx.output("compare.json").write_text(json.dumps(summary, indent=2, sort_keys=True), encoding="utf-8")


def _uq_start(ctx: RunContext, model: Model):
    if ctx.args.z:
        z = np.asarray(json.loads(ctx.args.z), dtype=np.float64)
        if z.shape != (model.config.latent_dim,):
            raise ValueError(f"--z needs {model.config.latent_dim} values, got shape {z.shape}")
        return z
    if not ctx.args.id:
        raise ValueError("give --id or --z")
    if not ctx.args.data:
        raise ValueError("--id needs --data")
    return _load_grid(DatasetManifest.read_csv(ctx.args.data), ctx.args.id)


def cmd_uq(ctx: RunContext) -> None:
    model, _ = load_checkpoint(ctx.args.checkpoint)
    uq_cfg = ctx.config.uq_config()
    result = predict_with_uncertainty(_uq_start(ctx, model), model, uq_cfg)
    payload = {"run_id": ctx.record.run_id, "n_samples": uq_cfg.n_samples, "properties": result.to_dict()}
    ctx.output("uq.json").write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")


def cmd_uq_converge(ctx: RunContext) -> None:
    model, _ = load_checkpoint(ctx.args.checkpoint)
    n_values = [int(v) for v in ctx.args.n_values.split(",")]
    table = convergence_sweep(_uq_start(ctx, model), model, n_values, ctx.config.uq_config())
    table.to_csv(ctx.output("convergence.csv"), index=False, lineterminator="\n")


# -------------- Parser --------------

# flag -> (config section, key); None section means a top-level key
_OVERRIDES: dict[str, tuple[Optional[str], str]] = {
    "seed": (None, "seed"),
    "workers": (None, "workers"),
    "count": ("generator", "count"),
    "edge": ("generator", "edge_voxels"),
    "noise_draws": ("material", "noise_draws"),
    "keep_fraction": ("split", "keep_fraction"),
    "epochs": ("schedule", "epochs_per_phase"),
    "n": ("uq", "n_samples"),
    "population": ("nsga", "population"),
    "generations": ("nsga", "generations"),
}


def overrides_from(args: argparse.Namespace) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for flag, (section, key) in _OVERRIDES.items():
        value = getattr(args, flag, None)
        if value is None:
            continue
        if section is None:
            out[key] = value
        else:
            out.setdefault(section, {})[key] = value
    if getattr(args, "results_dir", None):
        out.setdefault("paths", {})["results_dir"] = args.results_dir
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run configuration")
    common.add_argument("--profile", choices=["desk", "paper"], help="Default set (overrides the file)")
    common.add_argument("--results-dir", help="Root of the per-run output directories")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, help="Thread-pool size (capped by METAFORGE_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true", help="DEBUG logging")

    parser = argparse.ArgumentParser(prog="metaforge", description="Uncertainty-aware metamaterial design workbench")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, func: Callable[[RunContext], None], help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text, parents=[common])
        p.set_defaults(func=func)
        return p

    add("env", cmd_env, "Print interpreter and dependency versions")

    p = add("gen-data", cmd_gen_data, "Generate a voxel dataset")
    p.add_argument("--count", type=int)
    p.add_argument("--edge", type=int, help="Full-cell edge in voxels")

    p = add("simulate", cmd_simulate, "Label a manifest by FEA homogenization")
    p.add_argument("--manifest", required=True)
    p.add_argument("--noise-draws", type=int, help="Material draws per unit")

    p = add("train", cmd_train, "Progressive training schedule")
    p.add_argument("--data", required=True, help="Labeled dataset CSV")
    p.add_argument("--deterministic", action="store_true", help="Train the deterministic property head")
    p.add_argument("--keep-fraction", type=float, help="Portion of positive-nu units kept")
    p.add_argument("--epochs", type=int, help="Epochs per phase")
    p.add_argument("--compare-scratch", action="store_true", help="Also train from scratch with the final weights")

    p = add("evaluate", cmd_evaluate, "Reconstruction and property metrics per split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=["train", "val", "test", "all"], default="all")
    p.add_argument("--audit", type=int, default=0, help="UQ audit on the first N units of the split")

    p = add("encode", cmd_encode, "Latent means of every unit")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)

    p = add("interp", cmd_interp, "Spherical interpolation between two units")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--id1", required=True)
    p.add_argument("--id2", required=True)
    p.add_argument("--steps", type=int, default=8)

    p = add("design", cmd_design, "NSGA-II design in the latent space")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="Manifest whose encodings bound the search")
    p.add_argument("--case", choices=["bulk", "e-nu"], default="bulk")
    p.add_argument("--beta", type=float)
    p.add_argument("--vf", type=float, help="Target volume fraction")
    p.add_argument("--mode", choices=[m.value for m in DesignMode], default=DesignMode.ROBUST.value)
    p.add_argument("--sweep", action="store_true", help="Run the configured beta sweep")
    p.add_argument("--verify", action="store_true", help="FEA-verify every archived candidate")
    p.add_argument("--compare", action="store_true", help="Also run the other mode and compare archives")
    p.add_argument("--population", type=int)
    p.add_argument("--generations", type=int)

    for name, func, help_text in (
        ("uq", cmd_uq, "Uncertainty of one unit or latent vector"),
        ("uq-converge", cmd_uq_converge, "Total std against the sample count"),
    ):
        p = add(name, func, help_text)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data")
        p.add_argument("--id")
        p.add_argument("--z", help="Latent vector as a JSON list")
        p.add_argument("--n", type=int, help="Latent samples")
        if name == "uq-converge":
            p.add_argument("--n-values", default="10,20,30,40,50,60,70,80,90,100")

    return parser


# -------------- Entry point --------------

def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def configure_logging(verbose: bool) -> WarningCounter:
    config = json.loads(json.dumps(LOG_CONFIG))
    config["root"]["level"] = "DEBUG" if verbose else "INFO"
    logging.config.dictConfig(config)
    counter = WarningCounter()
    logging.getLogger().addHandler(counter)
    return counter


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    counter = configure_logging(args.verbose)
    log = logging.getLogger("metaforge")
    try:
        config = load_config(args.config, args.profile, overrides_from(args))
        if args.command == "env":
            cmd_env(RunContext(args, config, Path("."), RunRecord("env", "", "", "", _now()), log))
            return 0

        input_hash = hash_inputs(_input_paths(args))
        run_id = run_id_for(args.command, args, config, input_hash)
        results = Path(config.paths.results_dir)
        run_dir = results / f"{args.command}-{run_id}"
        run_dir.mkdir(parents=True, exist_ok=True)
        record = RunRecord(args.command, run_id, config.config_hash(), input_hash, _now())
        ctx = RunContext(args, config, run_dir, record, log)
        (run_dir / "config.json").write_text(
            json.dumps(config.model_dump(mode="json"), indent=2, sort_keys=True), encoding="utf-8"
        )

        log.info("%s: run %s -> %s", args.command, run_id, run_dir)
        args.func(ctx)

        record.finished = _now()
        stable = {k: v for k, v in asdict(record).items() if k not in ("started", "finished")}
        (run_dir / "run.json").write_text(json.dumps(stable, indent=2, sort_keys=True), encoding="utf-8")
        with open(results / "records.jsonl", "a", encoding="utf-8") as fh:
            fh.write(json.dumps(asdict(record), sort_keys=True) + "\n")
    except (MetaforgeError, ValueError, OSError) as e:
        log.error("%s failed: %s", args.command, e)
        return 1
    finally:
        logging.getLogger().removeHandler(counter)
    if counter.count:
        log.info("%s finished with %d warning(s)", args.command, counter.count)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
