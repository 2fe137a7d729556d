import math

import numpy as np
import pytest

from src.engine import autodiff as ad
from src.engine.autodiff import AdamState, LrSchedule, Tape, adam_step, decay_rate
from src.engine.errors import DegenerateAngle, ModelModeError, NonPositiveStd, ShapeMismatch
from src.engine.model import (
    STD_FLOOR,
    LabelScaler,
    LatentCode,
    LossWeights,
    MdnPrediction,
    Model,
    ModelConfig,
    gaussian_nll,
    kl_loss,
    load_checkpoint,
    mdn_nll,
    recon_loss,
    save_checkpoint,
    slerp,
    total_loss,
)
from src.engine.voxel_core import EighthCell


def _tiny(**overrides) -> ModelConfig:
    base = dict(
        latent_dim=3,
        input_edge=4,
        channels=(2,),
        encoder_hidden=(8,),
        decoder_hidden=(8,),
        final_channels=2,
        mdn_hidden=(8,),
        seed=7,
    )
    base.update(overrides)
    return ModelConfig(**base)


def test_kl_closed_forms():
    assert kl_loss(LatentCode(np.zeros(4), np.ones(4))) == pytest.approx(0.0)
    assert kl_loss(LatentCode(np.array([1.0, 2.0]), np.ones(2))) == pytest.approx(2.5)
    assert kl_loss(LatentCode(np.zeros(1), np.full(1, 2.0))) == pytest.approx(0.5 * (4.0 - math.log(4.0) - 1.0))
    with pytest.raises(ValueError):
        kl_loss(LatentCode(np.zeros(2), np.array([1.0, 0.0])))


def test_gaussian_nll_closed_forms():
    standard = MdnPrediction(np.zeros(2), np.ones(2))
    assert mdn_nll(standard, np.zeros(2)) == pytest.approx(math.log(2 * math.pi))
    wide = MdnPrediction(np.array([1.0, 0.0]), np.array([2.0, 1.0]))
    expected = (math.log(2.0) + 0.5 * math.log(2 * math.pi) + 0.5 * (2.0 / 2.0) ** 2) + (
        0.5 * math.log(2 * math.pi) + 0.5
    )
    assert mdn_nll(wide, np.array([3.0, 1.0])) == pytest.approx(expected)
    with pytest.raises(NonPositiveStd):
        mdn_nll(MdnPrediction(np.zeros(2), np.array([1.0, 0.0])), np.zeros(2))
    with pytest.raises(ShapeMismatch):
        mdn_nll(standard, np.zeros(3))


def test_total_loss_weights_terms():
    x = np.zeros((2, 2, 2))
    x_hat = np.full((2, 2, 2), 0.5)
    code = LatentCode(np.array([1.0, 2.0]), np.ones(2))
    pred = MdnPrediction(np.zeros(2), np.ones(2))
    assert recon_loss(x, x_hat) == pytest.approx(0.25)
    w = LossWeights(1.0, 0.1, 0.01)
    assert total_loss(x, x_hat, code, pred, np.zeros(2), w) == pytest.approx(
        0.25 + 0.1 * 2.5 + 0.01 * math.log(2 * math.pi)
    )
    with pytest.raises(ValueError):
        LossWeights(0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        LossWeights(-1.0, 0.0, 0.0)


def test_slerp_endpoints_and_norm():
    rng = np.random.default_rng(0)
    a, b = rng.normal(size=5), rng.normal(size=5)
    np.testing.assert_allclose(slerp(a, b, 0.0), a, atol=1e-12)
    np.testing.assert_allclose(slerp(a, b, 1.0), b, atol=1e-12)

    u, v = a / np.linalg.norm(a), b / np.linalg.norm(b)
    for t in np.linspace(0.0, 1.0, 7):
        assert np.linalg.norm(slerp(u, v, t)) == pytest.approx(1.0)
    np.testing.assert_allclose(slerp([1.0, 0.0], [0.0, 1.0], 0.5), [math.sqrt(0.5), math.sqrt(0.5)])


def test_slerp_degenerate_cases():
    np.testing.assert_allclose(slerp([1.0, 0.0], [2.0, 0.0], 0.5), [1.5, 0.0])
    with pytest.raises(DegenerateAngle):
        slerp([1.0, 0.0], [-1.0, 0.0], 0.5)
    with pytest.raises(DegenerateAngle):
        slerp([0.0, 0.0], [1.0, 0.0], 0.5)
    with pytest.raises(ValueError):
        slerp([1.0, 0.0], [0.0, 1.0], 1.5)
    with pytest.raises(ShapeMismatch):
        slerp([1.0, 0.0], [0.0, 1.0, 0.0], 0.5)


def test_config_validation_and_sizes():
    cfg = _tiny()
    assert cfg.bottleneck_edge == 2
    assert cfg.flat_size == 16
    assert ModelConfig.full_scale().input_edge == 24
    with pytest.raises(ValueError):
        ModelConfig(input_edge=6, channels=(2, 4))
    with pytest.raises(ValueError):
        ModelConfig(latent_dim=0)
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_encode_decode_shapes():
    model = Model(_tiny())
    rng = np.random.default_rng(1)
    cells = (rng.random((3, 4, 4, 4)) > 0.5).astype(float)

    single = model.encode(EighthCell(cells[0]))
    assert single.mean.shape == (3,) and single.dim == 3
    assert np.all(single.std > 0)
    batch = model.encode(cells)
    assert batch.mean.shape == (3, 3)
    np.testing.assert_allclose(batch.mean[0], single.mean)

    decoded = model.decode(single.mean)
    assert isinstance(decoded, EighthCell)
    assert decoded.edge_voxels == 4
    assert np.all((decoded.occupancy > 0) & (decoded.occupancy < 1))
    assert model.decode(batch.mean).shape == (3, 4, 4, 4)

    z = model.reparameterize(batch, np.random.default_rng(2))
    assert z.shape == (3, 3)
    with pytest.raises(ShapeMismatch):
        model.encode(np.zeros((6, 6, 6)))
    with pytest.raises(ShapeMismatch):
        model.decode(np.zeros(5))


def test_property_heads_and_modes():
    mdn = Model(_tiny())
    pred = mdn.predict_properties(np.zeros(3))
    assert pred.means.shape == (2,)
    assert np.all(pred.stds >= STD_FLOOR)
    with pytest.raises(ModelModeError):
        mdn.deterministic_predict(np.zeros(3))

    det = Model(_tiny(deterministic_head=True))
    pred = det.predict_properties(np.zeros((4, 3)))
    assert pred.means.shape == (4, 2)
    np.testing.assert_array_equal(pred.stds, 0.0)
    with pytest.raises(ModelModeError):
        det.mdn_predict(np.zeros(3))


def test_mdn_head_recovers_input_dependent_noise():
    # sigma grows tenfold across x, so log sigma is linear in the head input
    rng = np.random.default_rng(11)
    x = rng.uniform(0.0, 1.0, size=(2000, 1))
    sigma = 0.05 * 10.0 ** x[:, 0]
    y = np.column_stack([2.0 * x[:, 0] + sigma * rng.standard_normal(2000), 0.2 * rng.standard_normal(2000)])

    model = Model(_tiny(latent_dim=1, mdn_hidden=()))
    head = {name: p for name, p in model.params.items() if name.startswith("mdn.")}
    state = AdamState()
    schedule = LrSchedule(initial_rate=0.05, decay=0.998)
    for step in range(3000):
        state.learning_rate = decay_rate(schedule, step)
        with Tape() as tape:
            mu, log_sigma = model.mdn_tensor(ad.Tensor(x))
            loss = gaussian_nll(mu, log_sigma, y)
        grads = {t.name: g for t, g in ad.backward(tape, loss).items()}
        adam_step(state, head, grads)

    held_out = np.linspace(0.0, 1.0, 101)
    pred = model.mdn_predict(held_out[:, None])
    ratio = pred.stds[:, 0] / (0.05 * 10.0**held_out)
    assert np.mean(np.abs(ratio - 1.0) <= 0.15) >= 0.9
    np.testing.assert_allclose(pred.means[:, 0], 2.0 * held_out, atol=0.1)
    assert np.all(np.abs(pred.stds[:, 1] / 0.2 - 1.0) <= 0.15)


def test_scaler_maps_head_outputs_to_physical_units():
    scaler = LabelScaler(np.array([5000.0, 0.3]), np.array([1000.0, 0.05]))
    model = Model(_tiny(), scaler)
    plain = Model(_tiny())
    z = np.random.default_rng(3).normal(size=3)
    scaled, raw = model.mdn_predict(z), plain.mdn_predict(z)
    np.testing.assert_allclose(scaled.means, raw.means * scaler.scale + scaler.mean)
    np.testing.assert_allclose(scaled.stds, raw.stds * scaler.scale)


def test_label_scaler_fit():
    labels = np.array([[100.0, 0.2], [300.0, 0.2]])
    scaler = LabelScaler.fit(labels)
    np.testing.assert_allclose(scaler.transform(labels), [[-1.0, 0.0], [1.0, 0.0]])
    np.testing.assert_allclose(scaler.inverse(scaler.transform(labels)), labels)
    assert scaler.scale[1] == 1.0
    back = LabelScaler.from_dict(scaler.to_dict())
    np.testing.assert_array_equal(back.mean, scaler.mean)


def test_loss_terms_reach_every_used_parameter():
    model = Model(_tiny())
    rng = np.random.default_rng(4)
    x = (rng.random((2, 4, 4, 4)) > 0.5).astype(float)
    y = rng.normal(size=(2, 2))
    with Tape() as tape:
        terms = model.loss_terms(x, y, rng)
        loss = ad.add(ad.add(terms["recon"], terms["kl"]), terms["nll"])
    grads = {t.name: g for t, g in ad.backward(tape, loss).items()}
    assert set(terms) == {"recon", "kl", "nll"}
    assert set(grads) == set(model.params)


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    scaler = LabelScaler(np.array([1.0, 2.0]), np.array([3.0, 4.0]))
    model = Model(_tiny(seed=11), scaler)
    path = save_checkpoint(
        model, tmp_path / "ckpt" / "model", LossWeights(1.0, 0.5, 0.25), "final", 3, {"val": 1.5}
    )
    assert path.with_suffix(".params").exists()

    loaded, sidecar = load_checkpoint(path)
    assert sidecar["training_phase"] == "final"
    assert sidecar["epoch"] == 3
    assert sidecar["metrics"] == {"val": 1.5}
    assert sidecar["loss_weights"] == {"alpha1": 1.0, "alpha2": 0.5, "alpha3": 0.25}
    assert loaded.config == model.config
    for name, value in model.state().items():
        assert loaded.params[name].data.tobytes() == value.tobytes()
    z = np.array([0.1, -0.2, 0.3])
    np.testing.assert_array_equal(loaded.mdn_predict(z).means, model.mdn_predict(z).means)


def test_load_state_rejects_mismatch():
    model = Model(_tiny())
    state = model.state()
    state.pop("enc.mean.b")
    with pytest.raises(KeyError):
        model.load_state(state)
    state = model.state()
    state["enc.mean.b"] = np.zeros(7)
    with pytest.raises(ShapeMismatch):
        model.load_state(state)
