# tests/test_diffusion.py
from dataclasses import replace
from decimal import Decimal, getcontext

import numpy as np
import pytest

from app.diffusion import (DenoiserModel, TrainConfig, ddpm_sample, draw_training_noise, init_denoiser,
                           latents_from_factor, ldm_loss, make_mixture_dataset, make_schedule, q_sample,
                           timestep_embedding, train_toy)
from app.fusion import GaussianFactor
from app.nn import init_mlp, zero_output_layer
from app.rng import make_generator, standard_normal


class OracleDenoiser:
    """Conoce z0, por lo que recupera ε exactamente."""

    def __init__(self, z0, schedule):
        self.z0 = np.asarray(z0, dtype=np.float64)
        self.schedule = schedule

    def predict(self, z_t, t):
        alpha_bar = self.schedule.alpha_bars[np.asarray(t) - 1][:, None]
        return (z_t - np.sqrt(alpha_bar) * self.z0) / np.sqrt(1.0 - alpha_bar)

    def backward(self, z_t, t, grad):
        return []


def _zero_denoiser(dim):
    model = init_denoiser(dim, hidden=(8,), seed=0)
    return model.with_mlp(zero_output_layer(model.mlp))


# =============================================================================
# Calendario
# =============================================================================
def test_single_step_schedule():
    schedule = make_schedule(1)
    np.testing.assert_array_equal(schedule.betas, [1e-4])
    assert schedule.posterior_variance(1) == 0.0
    assert schedule.alpha_bar(0) == 1.0


def test_alpha_bar_matches_high_precision_product():
    getcontext().prec = 50
    schedule = make_schedule(1000)
    product = Decimal(1)
    for beta in schedule.betas:
        product *= 1 - Decimal(float(beta))
    assert schedule.alpha_bar(1000) == pytest.approx(float(product), rel=1e-12)
    assert np.all(np.diff(schedule.alpha_bars) < 0)
    assert schedule.betas[0] == 1e-4 and schedule.betas[-1] == pytest.approx(2e-2)


@pytest.mark.parametrize("args", [(0,), (10, 0.0, 0.1), (10, 0.2, 0.1), (10, 0.1, 1.0)])
def test_schedule_rejects_invalid(args):
    with pytest.raises(ValueError):
        make_schedule(*args)


def test_timestep_out_of_range():
    schedule = make_schedule(10)
    with pytest.raises(ValueError):
        q_sample(np.zeros(2), 0, np.zeros(2), schedule)
    with pytest.raises(ValueError):
        q_sample(np.zeros(2), 11, np.zeros(2), schedule)


# =============================================================================
# Difusión directa
# =============================================================================
def test_q_sample_closed_form():
    schedule = make_schedule(100)
    z0 = np.array([[1.0, -2.0], [0.5, 0.5]])
    eps = np.array([[0.3, 0.1], [-1.0, 2.0]])
    t = np.array([1, 100])
    out = q_sample(z0, t, eps, schedule)
    for i in range(2):
        ab = schedule.alpha_bars[t[i] - 1]
        np.testing.assert_allclose(out[i], np.sqrt(ab) * z0[i] + np.sqrt(1 - ab) * eps[i], rtol=1e-15)
    with pytest.raises(ValueError):
        q_sample(z0, t, eps[:, :1], schedule)


def test_q_sample_moments():
    schedule = make_schedule(1000)
    z0 = np.array([1.5, -0.5])
    eps = standard_normal(make_generator(2), (200_000, 2))
    samples = q_sample(np.broadcast_to(z0, eps.shape), 500, eps, schedule)
    ab = schedule.alpha_bar(500)
    np.testing.assert_allclose(samples.mean(axis=0), np.sqrt(ab) * z0, atol=0.01)
    np.testing.assert_allclose(samples.var(axis=0), 1.0 - ab, rtol=0.02)


def test_timestep_embedding():
    emb = timestep_embedding([0, 5, 999])
    assert emb.shape == (3, 16)
    np.testing.assert_array_equal(emb[0], [0.0] * 8 + [1.0] * 8)
    assert emb[1, 0] == pytest.approx(np.sin(5.0))
    with pytest.raises(ValueError):
        timestep_embedding([1], dim=7)


# =============================================================================
# Pérdida
# =============================================================================
def test_oracle_denoiser_has_zero_loss():
    schedule = make_schedule(50)
    z0 = make_mixture_dataset("mix2d", 64, seed=1)
    loss, grads = ldm_loss(OracleDenoiser(z0, schedule), z0, schedule, seed=3)
    assert loss < 1e-20
    assert grads == []


def test_zero_denoiser_loss_is_noise_variance():
    schedule = make_schedule(100)
    z0 = make_mixture_dataset("normal2d", 8192, seed=2)
    loss, _ = ldm_loss(_zero_denoiser(2), z0, schedule, seed=5)
    assert loss == pytest.approx(1.0, abs=0.05)


def test_loss_is_seeded():
    schedule = make_schedule(100)
    model = init_denoiser(2, hidden=(16,), seed=1)
    z0 = make_mixture_dataset("mix2d", 32, seed=0)
    a = ldm_loss(model, z0, schedule, seed=4, stream=(0, 1))
    b = ldm_loss(model, z0, schedule, seed=4, stream=(0, 1))
    c = ldm_loss(model, z0, schedule, seed=4, stream=(0, 2))
    assert a[0] == b[0]
    for ga, gb in zip(a[1], b[1]):
        np.testing.assert_array_equal(ga, gb)
    assert a[0] != c[0]


def test_training_noise_draws_steps_in_range():
    t, eps = draw_training_noise(1000, 3, 20, 7)
    assert t.min() >= 1 and t.max() <= 20
    assert eps.shape == (1000, 3)


def test_empty_batch_rejected():
    with pytest.raises(ValueError):
        ldm_loss(_zero_denoiser(2), np.zeros((0, 2)), make_schedule(10), seed=0)


# =============================================================================
# Muestreo
# =============================================================================
def test_single_step_sampling_trace():
    schedule = make_schedule(1)
    out = ddpm_sample(_zero_denoiser(2), schedule, dim=2, n=5, seed=8)
    start = standard_normal(make_generator(8), (5, 2))
    np.testing.assert_array_equal(out, start / np.sqrt(schedule.alphas[0]))


def test_sampling_is_seeded_and_checks_dim():
    schedule = make_schedule(20)
    model = init_denoiser(2, hidden=(8,), seed=3)
    np.testing.assert_array_equal(ddpm_sample(model, schedule, 2, 10, seed=1), ddpm_sample(model, schedule, 2, 10, 1))
    with pytest.raises(ValueError):
        ddpm_sample(model, schedule, 3, 10, seed=1)


def test_denoiser_rejects_inconsistent_widths():
    with pytest.raises(ValueError):
        DenoiserModel(init_mlp((4, 8, 2)), latent_dim=2)


# =============================================================================
# Entrenamiento
# =============================================================================
def test_train_config_from_mapping():
    config = TrainConfig.from_mapping({"epochs": 5, "hidden": [32, 32]}, lr=None, seed=3)
    assert config.epochs == 5 and config.hidden == (32, 32) and config.seed == 3 and config.lr == 1e-3
    with pytest.raises(ValueError):
        TrainConfig.from_mapping({"learning_rate": 0.1})


def test_training_reduces_loss_and_is_deterministic():
    data = make_mixture_dataset("mix2d", 256, seed=0)
    config = TrainConfig(hidden=(32, 32), batch_size=32, epochs=40, lr=2e-3, seed=1, log_every=0)
    schedule = make_schedule(100, 1e-4, 0.1)
    model_a, trace_a = train_toy(data, schedule, config)
    model_b, trace_b = train_toy(data, schedule, config)
    assert list(trace_a.columns) == ["epoch", "loss"]
    assert len(trace_a) == 40
    assert trace_a["loss"].tail(10).mean() < trace_a["loss"].head(10).mean()
    assert trace_a["loss"].tolist() == trace_b["loss"].tolist()
    for p, q in zip(model_a.mlp.parameters(), model_b.mlp.parameters()):
        np.testing.assert_array_equal(p, q)


def test_weight_averaging_keeps_loss_trace_and_changes_weights():
    data = make_mixture_dataset("mix2d", 64, seed=0)
    schedule = make_schedule(20, 1e-4, 0.1)
    raw_config = TrainConfig(hidden=(8,), batch_size=16, epochs=5, seed=3, log_every=0)
    raw, raw_trace = train_toy(data, schedule, raw_config)
    averaged, averaged_trace = train_toy(data, schedule, replace(raw_config, ema_decay=0.9))
    assert raw_trace["loss"].tolist() == averaged_trace["loss"].tolist()
    assert any(not np.array_equal(p, q) for p, q in zip(raw.mlp.parameters(), averaged.mlp.parameters()))
    with pytest.raises(ValueError):
        TrainConfig(ema_decay=1.0)


def test_trained_sampler_covers_both_modes():
    data = make_mixture_dataset("mix2d", 512, seed=0)
    config = TrainConfig(hidden=(64, 64), batch_size=64, epochs=200, lr=2e-3, seed=0, log_every=0)
    schedule = make_schedule(100, 1e-4, 0.1)
    model, _ = train_toy(data, schedule, config)
    samples = ddpm_sample(model, schedule, 2, 10_000, seed=4)
    for mode in ([2.0, 2.0], [-2.0, -2.0]):
        near = np.linalg.norm(samples - np.array(mode), axis=1) <= 1.0
        assert near.mean() >= 0.30


def test_trained_sampler_matches_standard_normal():
    data = make_mixture_dataset("normal2d", 8192, seed=1)
    data = data - data.mean(axis=0)
    data = np.linalg.solve(np.linalg.cholesky(np.cov(data.T, bias=True)), data.T).T
    config = TrainConfig(hidden=(64, 64), batch_size=128, epochs=80, lr=2e-3, seed=2, ema_decay=0.999,
                         log_every=0)
    # N(0, I) es estacionaria bajo la difusión directa: z_T ~ N(0, I) con cualquier ᾱ_T
    schedule = make_schedule(20, 1e-4, 0.1)
    model, _ = train_toy(data, schedule, config)
    samples = ddpm_sample(model, schedule, 2, 10_000, seed=6)
    assert np.all(np.abs(samples.mean(axis=0)) <= 0.05)
    assert np.all(np.abs(np.cov(samples.T) - np.eye(2)) <= 0.05)


def test_train_rejects_bad_data():
    schedule = make_schedule(10)
    with pytest.raises(ValueError):
        train_toy(np.zeros((0, 2)), schedule, TrainConfig(epochs=1))
    with pytest.raises(ValueError):
        train_toy(np.array([[np.nan, 0.0]]), schedule, TrainConfig(epochs=1))


# =============================================================================
# Datos de juguete
# =============================================================================
def test_mixture_dataset():
    data = make_mixture_dataset("mix2d", 4000, seed=3)
    np.testing.assert_array_equal(data, make_mixture_dataset("mix2d", 4000, seed=3))
    upper = data[data.sum(axis=1) > 0]
    np.testing.assert_allclose(upper.mean(axis=0), [2.0, 2.0], atol=0.05)
    assert 0.45 < len(upper) / len(data) < 0.55
    assert make_mixture_dataset("normal2d", 10, seed=0).shape == (10, 2)
    with pytest.raises(ValueError):
        make_mixture_dataset("ring", 10, seed=0)


def test_latents_from_factor():
    z = latents_from_factor(GaussianFactor([1.0, 2.0, 3.0], [0.1, 0.1, 0.1]), 50, seed=0)
    assert z.shape == (50, 3)
