"""Convolutional VAE over eighth cells with a single-Gaussian property head.

The encoder maps an eighth cell to a latent Gaussian (mean, log-variance),
the decoder maps a latent vector back to a sigmoid occupancy field, and the
property head maps the latent mean to (E, nu). Two head variants exist:

- MDN head: FC 256 -> 128 -> 4, the four outputs being two means and two raw
  log-stds (std = exp(raw) with a floor of 1e-6);
- deterministic head: FC 256 -> 128 -> 2, trained with MSE.

Property heads work in standardized label units; the model's ``LabelScaler``
converts to MPa and the dimensionless Poisson ratio.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import DegenerateAngle, ModelModeError, NonPositiveStd, ShapeMismatch
from .voxel_core import EighthCell, VoxelGrid

logger = logging.getLogger(__name__)

STD_FLOOR = 1e-6
LOG_STD_FLOOR = math.log(STD_FLOOR)
PROPERTIES = ("E", "nu")


@dataclass
class ModelConfig:
    latent_dim: int = 16
    input_edge: int = 8
    channels: tuple[int, ...] = (16, 32)
    convs_per_block: int = 1
    encoder_hidden: tuple[int, ...] = (64,)
    decoder_hidden: tuple[int, ...] = (64,)
    final_channels: int = 8
    final_convs: int = 1
    mdn_hidden: tuple[int, ...] = (256, 128)
    deterministic_head: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        self.channels = tuple(self.channels)
        self.encoder_hidden = tuple(self.encoder_hidden)
        self.decoder_hidden = tuple(self.decoder_hidden)
        self.mdn_hidden = tuple(self.mdn_hidden)
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if not self.channels:
            raise ValueError("need at least one conv block")
        if self.input_edge % (2 ** len(self.channels)):
            raise ValueError(
                f"input_edge {self.input_edge} does not survive {len(self.channels)} poolings"
            )

    @property
    def bottleneck_edge(self) -> int:
        return self.input_edge // 2 ** len(self.channels)

    @property
    def flat_size(self) -> int:
        return self.channels[-1] * self.bottleneck_edge**3

    @classmethod
    def full_scale(cls, **overrides: Any) -> "ModelConfig":
        base = dict(
            latent_dim=32,
            input_edge=24,
            channels=(32, 64, 96),
            convs_per_block=3,
            encoder_hidden=(1000, 100),
            decoder_hidden=(1000,),
            final_channels=16,
            final_convs=2,
        )
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        return cls(**data)


@dataclass(frozen=True, eq=False)
class LatentCode:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self) -> None:
        mean = np.asarray(self.mean, dtype=np.float64)
        std = np.asarray(self.std, dtype=np.float64)
        if mean.shape != std.shape:
            raise ShapeMismatch("latent mean/std differ", mean.shape, std.shape)
        if not np.all(std >= 0):
            raise ValueError("latent std must be non-negative")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @property
    def dim(self) -> int:
        return int(self.mean.shape[-1])


@dataclass(frozen=True, eq=False)
class MdnPrediction:
    means: np.ndarray  # [..., (E MPa, nu)]
    stds: np.ndarray

    def __post_init__(self) -> None:
        means = np.asarray(self.means, dtype=np.float64)
        stds = np.asarray(self.stds, dtype=np.float64)
        if means.shape != stds.shape:
            raise ShapeMismatch("prediction means/stds differ", means.shape, stds.shape)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "stds", stds)


@dataclass(frozen=True)
class LossWeights:
    alpha1: float = 1.0
    alpha2: float = 1e-3
    alpha3: float = 1e-3

    def __post_init__(self) -> None:
        w = (self.alpha1, self.alpha2, self.alpha3)
        if min(w) < 0:
            raise ValueError(f"loss weights must be >= 0, got {w}")
        if max(w) == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass
class LabelScaler:
    """Per-property affine map between physical and standardized labels."""

    mean: np.ndarray = field(default_factory=lambda: np.zeros(2))
    scale: np.ndarray = field(default_factory=lambda: np.ones(2))

    @classmethod
    def fit(cls, labels: np.ndarray) -> "LabelScaler":
        labels = np.asarray(labels, dtype=np.float64)
        scale = labels.std(axis=0)
        scale = np.where(scale > 0, scale, 1.0)
        return cls(labels.mean(axis=0), scale)

    def transform(self, labels: np.ndarray) -> np.ndarray:
        return (np.asarray(labels, dtype=np.float64) - self.mean) / self.scale

    def inverse(self, standardized: np.ndarray) -> np.ndarray:
        return np.asarray(standardized) * self.scale + self.mean

    def to_dict(self) -> dict[str, list[float]]:
        return {"mean": self.mean.tolist(), "scale": self.scale.tolist()}

    @classmethod
    def from_dict(cls, data: dict[str, list[float]]) -> "LabelScaler":
        return cls(np.array(data["mean"], dtype=np.float64), np.array(data["scale"], dtype=np.float64))


# -------------- Loss terms (tensor level) --------------

def kl_term(mean: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mean, exp(logvar)) || N(0, I)) summed over dims, averaged over the batch."""
    per = ad.sub(ad.add(ad.square(mean), ad.exp(logvar)), ad.add(logvar, 1.0))
    per_sample = ad.reduce_sum(per, axis=-1)
    return ad.mul(ad.reduce_mean(per_sample), 0.5)


def gaussian_nll(mu: Tensor, log_sigma: Tensor, y) -> Tensor:
    """Batch mean of the Gaussian negative log-likelihood summed over properties."""
    resid = ad.sub(y, mu)
    inv_var = ad.exp(ad.mul(log_sigma, -2.0))
    per = ad.add(ad.add(log_sigma, 0.5 * math.log(2 * math.pi)), ad.mul(ad.mul(ad.square(resid), inv_var), 0.5))
    axis = -1 if per.ndim >= 1 else None
    summed = ad.reduce_sum(per, axis=axis)
    return ad.reduce_mean(summed) if summed.ndim else summed


# -------------- Loss terms (array level) --------------

def kl_loss(code: LatentCode) -> float:
    if np.any(code.std <= 0):
        raise ValueError("kl_loss needs strictly positive std")
    mean = np.atleast_2d(code.mean)
    logvar = 2.0 * np.log(np.atleast_2d(code.std))
    return kl_term(Tensor(mean), Tensor(logvar)).item()


def recon_loss(x, x_hat) -> float:
    x = x.occupancy if isinstance(x, VoxelGrid) else np.asarray(x, dtype=np.float64)
    x_hat = x_hat.occupancy if isinstance(x_hat, VoxelGrid) else np.asarray(x_hat, dtype=np.float64)
    return ad.mse(x_hat, x).item()


def mdn_nll(pred: MdnPrediction, y) -> float:
    if not np.all(pred.stds > 0):
        raise NonPositiveStd("mdn_nll needs strictly positive stds")
    y = np.asarray(y, dtype=np.float64)
    if y.shape != pred.means.shape:
        raise ShapeMismatch("mdn_nll: labels do not match predictions", y.shape, pred.means.shape)
    means, stds = np.atleast_2d(pred.means), np.atleast_2d(pred.stds)
    return gaussian_nll(Tensor(means), Tensor(np.log(stds)), np.atleast_2d(y)).item()


def total_loss(x, x_hat, code: LatentCode, pred: MdnPrediction, y, w: LossWeights) -> float:
    total = w.alpha1 * recon_loss(x, x_hat)
    if w.alpha2:
        total += w.alpha2 * kl_loss(code)
    if w.alpha3:
        total += w.alpha3 * mdn_nll(pred, y)
    return total


def slerp(z1: np.ndarray, z2: np.ndarray, t: float, tol: float = 1e-12) -> np.ndarray:
    """Spherical interpolation; parallel inputs fall back to linear interpolation."""
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    if z1.shape != z2.shape:
        raise ShapeMismatch("slerp endpoints differ", z1.shape, z2.shape)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    n1, n2 = np.linalg.norm(z1), np.linalg.norm(z2)
    if n1 == 0 or n2 == 0:
        raise DegenerateAngle("slerp endpoint has zero length")
    cos = float(np.clip(z1 @ z2 / (n1 * n2), -1.0, 1.0))
    if cos <= -1.0 + tol:
        raise DegenerateAngle("slerp endpoints are antipodal")
    if cos >= 1.0 - tol:
        return (1.0 - t) * z1 + t * z2
    theta = math.acos(cos)
    s = math.sin(theta)
    return math.sin((1.0 - t) * theta) / s * z1 + math.sin(t * theta) / s * z2


# -------------- Network --------------

class Model:
    """VAE + property head; parameters live in ``self.params`` in creation order."""

    def __init__(self, config: ModelConfig, scaler: LabelScaler | None = None):
        self.config = config
        self.scaler = scaler or LabelScaler()
        self.params: dict[str, Parameter] = {}
        self._build(np.random.default_rng(config.seed))

    # construction
    def _conv(self, rng, name: str, c_in: int, c_out: int) -> None:
        fan_in, fan_out = c_in * 27, c_out * 27
        self._add(f"{name}.w", ad.glorot_uniform(rng, (c_out, c_in, 3, 3, 3), fan_in, fan_out))
        self._add(f"{name}.b", np.zeros(c_out))

    def _dense(self, rng, name: str, n_in: int, n_out: int) -> None:
        self._add(f"{name}.w", ad.glorot_uniform(rng, (n_in, n_out), n_in, n_out))
        self._add(f"{name}.b", np.zeros(n_out))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Parameter(value, name)

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        c_in = 1
        for b, c in enumerate(cfg.channels):
            for k in range(cfg.convs_per_block):
                self._conv(rng, f"enc.block{b}.conv{k}", c_in, c)
                c_in = c
        n_in = cfg.flat_size
        for i, n in enumerate(cfg.encoder_hidden):
            self._dense(rng, f"enc.fc{i}", n_in, n)
            n_in = n
        self._dense(rng, "enc.mean", n_in, cfg.latent_dim)
        self._dense(rng, "enc.logvar", n_in, cfg.latent_dim)

        n_in = cfg.latent_dim
        for i, n in enumerate(cfg.decoder_hidden):
            self._dense(rng, f"dec.fc{i}", n_in, n)
            n_in = n
        self._dense(rng, "dec.fc_out", n_in, cfg.flat_size)
        c_in = cfg.channels[-1]
        for b, c in enumerate(reversed(cfg.channels)):
            for k in range(cfg.convs_per_block):
                self._conv(rng, f"dec.block{b}.conv{k}", c_in, c)
                c_in = c
        for k in range(cfg.final_convs):
            self._conv(rng, f"dec.final{k}", c_in, cfg.final_channels)
            c_in = cfg.final_channels
        self._conv(rng, "dec.out", c_in, 1)

        head = "det" if cfg.deterministic_head else "mdn"
        n_in = cfg.latent_dim
        for i, n in enumerate(cfg.mdn_hidden):
            self._dense(rng, f"{head}.fc{i}", n_in, n)
            n_in = n
        self._dense(rng, f"{head}.out", n_in, 2 if cfg.deterministic_head else 4)

    def _p(self, name: str) -> Parameter:
        return self.params[name]

    # tensor-level passes
    def encode_tensor(self, x: Tensor) -> tuple[Tensor, Tensor]:
        cfg = self.config
        e = cfg.input_edge
        if x.ndim != 5 or x.shape[1:] != (1, e, e, e):
            raise ShapeMismatch("encoder input", x.shape, (None, 1, e, e, e))
        h = x
        for b in range(len(cfg.channels)):
            for k in range(cfg.convs_per_block):
                name = f"enc.block{b}.conv{k}"
                h = ad.relu(ad.conv3d(h, self._p(f"{name}.w"), self._p(f"{name}.b"), padding=1))
            h = ad.maxpool3d(h, 2)
        h = ad.reshape(h, (x.shape[0], -1))
        for i in range(len(cfg.encoder_hidden)):
            h = ad.relu(ad.dense(h, self._p(f"enc.fc{i}.w"), self._p(f"enc.fc{i}.b")))
        mean = ad.dense(h, self._p("enc.mean.w"), self._p("enc.mean.b"))
        logvar = ad.dense(h, self._p("enc.logvar.w"), self._p("enc.logvar.b"))
        return mean, logvar

    def decode_tensor(self, z: Tensor) -> Tensor:
        cfg = self.config
        if z.ndim != 2 or z.shape[1] != cfg.latent_dim:
            raise ShapeMismatch("decoder input", z.shape, (None, cfg.latent_dim))
        h = z
        for i in range(len(cfg.decoder_hidden)):
            h = ad.relu(ad.dense(h, self._p(f"dec.fc{i}.w"), self._p(f"dec.fc{i}.b")))
        h = ad.relu(ad.dense(h, self._p("dec.fc_out.w"), self._p("dec.fc_out.b")))
        s = cfg.bottleneck_edge
        h = ad.reshape(h, (z.shape[0], cfg.channels[-1], s, s, s))
        for b in range(len(cfg.channels)):
            h = ad.upsample3d(h, 2)
            for k in range(cfg.convs_per_block):
                name = f"dec.block{b}.conv{k}"
                h = ad.relu(ad.conv3d(h, self._p(f"{name}.w"), self._p(f"{name}.b"), padding=1))
        for k in range(cfg.final_convs):
            h = ad.relu(ad.conv3d(h, self._p(f"dec.final{k}.w"), self._p(f"dec.final{k}.b"), padding=1))
        return ad.sigmoid(ad.conv3d(h, self._p("dec.out.w"), self._p("dec.out.b"), padding=1))

    def _head(self, z: Tensor, head: str) -> Tensor:
        cfg = self.config
        if z.ndim != 2 or z.shape[1] != cfg.latent_dim:
            raise ShapeMismatch("property head input", z.shape, (None, cfg.latent_dim))
        h = z
        for i in range(len(cfg.mdn_hidden)):
            h = ad.relu(ad.dense(h, self._p(f"{head}.fc{i}.w"), self._p(f"{head}.fc{i}.b")))
        return ad.dense(h, self._p(f"{head}.out.w"), self._p(f"{head}.out.b"))

    def mdn_tensor(self, z: Tensor) -> tuple[Tensor, Tensor]:
        """Standardized means and floored log-stds."""
        if self.config.deterministic_head:
            raise ModelModeError("model carries the deterministic head, not the MDN head")
        out = self._head(z, "mdn")
        means = ad.take_last(out, 0, 2)
        raw = ad.take_last(out, 2, 4)
        return means, ad.clamp_min(raw, LOG_STD_FLOOR)

    def deterministic_tensor(self, z: Tensor) -> Tensor:
        if not self.config.deterministic_head:
            raise ModelModeError("model carries the MDN head, not the deterministic head")
        return self._head(z, "det")

    # array-level API
    def _batch(self, x) -> tuple[np.ndarray, bool]:
        arr = x.occupancy if isinstance(x, VoxelGrid) else np.asarray(x, dtype=np.float64)
        single = arr.ndim == 3
        if single:
            arr = arr[None]
        e = self.config.input_edge
        if arr.shape[1:] != (e, e, e):
            raise ShapeMismatch("encode: eighth-cell edge does not match the model", arr.shape, (e, e, e))
        return arr[:, None], single

    def encode(self, x) -> LatentCode:
        batch, single = self._batch(x)
        mean, logvar = self.encode_tensor(Tensor(batch))
        m, s = mean.data, np.exp(0.5 * logvar.data)
        return LatentCode(m[0], s[0]) if single else LatentCode(m, s)

    def reparameterize(self, code: LatentCode, rng: np.random.Generator) -> np.ndarray:
        return code.mean + code.std * rng.standard_normal(code.mean.shape)

    def decode(self, z) -> EighthCell | np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        out = self.decode_tensor(Tensor(z[None] if single else z)).data[:, 0]
        return EighthCell(out[0]) if single else out

    def mdn_predict(self, z) -> MdnPrediction:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        means, log_std = self.mdn_tensor(Tensor(z[None] if single else z))
        mu = self.scaler.inverse(means.data)
        sd = np.maximum(np.exp(log_std.data) * self.scaler.scale, STD_FLOOR)
        return MdnPrediction(mu[0], sd[0]) if single else MdnPrediction(mu, sd)

    def deterministic_predict(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        single = z.ndim == 1
        out = self.scaler.inverse(self.deterministic_tensor(Tensor(z[None] if single else z)).data)
        return out[0] if single else out

    def predict_properties(self, z) -> MdnPrediction:
        """MDN prediction, or the deterministic head with zero std."""
        if self.config.deterministic_head:
            means = self.deterministic_predict(z)
            return MdnPrediction(means, np.zeros_like(means))
        return self.mdn_predict(z)

    def loss_terms(
        self, x: np.ndarray, y_std: np.ndarray | None, rng: np.random.Generator | None
    ) -> dict[str, Tensor]:
        """Recon, KL and property terms on a batch of eighth cells.

        ``rng`` draws the reparameterized latent; ``None`` decodes the mean.
        The property head consumes the latent mean. ``y_std`` holds
        standardized labels.
        """
        batch = Tensor(np.asarray(x, dtype=np.float64)[:, None])
        mean, logvar = self.encode_tensor(batch)
        if rng is None:
            z = mean
        else:
            eps = rng.standard_normal(mean.shape)
            z = ad.add(mean, ad.mul(ad.exp(ad.mul(logvar, 0.5)), eps))
        terms = {"recon": ad.mse(self.decode_tensor(z), batch), "kl": kl_term(mean, logvar)}
        if y_std is not None:
            if self.config.deterministic_head:
                terms["nll"] = ad.mse(self.deterministic_tensor(mean), y_std)
            else:
                mu, log_sigma = self.mdn_tensor(mean)
                terms["nll"] = gaussian_nll(mu, log_sigma, y_std)
        return terms

    # parameter state
    def state(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        if missing:
            raise KeyError(f"state lacks parameters {sorted(missing)}")
        for name, p in self.params.items():
            value = np.asarray(state[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeMismatch(f"parameter {name}", value.shape, p.shape)
            p.data = value.copy()

    def parameter_count(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))


# -------------- Checkpoints --------------

def save_checkpoint(
    model: Model,
    path: str | Path,
    loss_weights: LossWeights | None = None,
    training_phase: str = "",
    epoch: int = 0,
    metrics: dict[str, Any] | None = None,
) -> Path:
    """Write ``<path>.params`` (parameter blob) and ``<path>.json`` (sidecar)."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = ad.encode_parameters({name: p.data for name, p in model.params.items()})
    path.with_suffix(".params").write_bytes(blob)
    sidecar = {
        "model_config": model.config.to_dict(),
        "loss_weights": asdict(loss_weights or LossWeights()),
        "training_phase": training_phase,
        "epoch": epoch,
        "metrics": metrics or {},
        "label_scaler": model.scaler.to_dict(),
    }
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True), encoding="utf-8")
    logger.info("checkpoint written to %s (%d parameters)", path.with_suffix(".params"), model.parameter_count())
    return path


def load_checkpoint(path: str | Path) -> tuple[Model, dict[str, Any]]:
    path = Path(path)
    sidecar = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    config = ModelConfig.from_dict(sidecar["model_config"])
    model = Model(config, LabelScaler.from_dict(sidecar["label_scaler"]))
    model.load_state(ad.decode_parameters(path.with_suffix(".params").read_bytes()))
    return model, sidecar
