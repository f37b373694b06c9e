# app/diffusion.py
"""
Difusión probabilística (DDPM) a escala de escritorio sobre latentes de baja dimensión

Contiene:
  1. DiffusionSchedule / make_schedule: β lineal y productos acumulados ᾱ.
  2. q_sample: marginal cerrada z_t = √ᾱ_t·z0 + √(1−ᾱ_t)·ε.
  3. DenoiserModel: MLP que predice ε a partir de [z_t, embedding(t)].
  4. ldm_loss: objetivo ‖ε − ε̂(z_t, t)‖² con gradientes manuales.
  5. ddpm_sample: muestreo ancestral con varianza posterior β̃_t.
  6. train_toy: ciclo de entrenamiento con Adam sobre un conjunto de latentes.

Los pasos de tiempo se indexan de 1 a T.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.fusion import GaussianFactor, sample_gaussian
from app.nn import MlpModel, init_mlp, init_optimizer, mlp_backward, mlp_forward, optimizer_step
from app.rng import make_generator, standard_normal

logger = logging.getLogger(__name__)

EMBED_DIM = 16
MIXTURE_KINDS = ("mix2d", "normal2d")


# =============================================================================
# Calendario de ruido
# =============================================================================
@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray = field(repr=False)
    alphas: np.ndarray = field(init=False, repr=False)
    alpha_bars: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.atleast_1d(np.asarray(self.betas, dtype=np.float64)).copy()
        if betas.ndim != 1 or betas.size < 1:
            raise ValueError("El calendario necesita al menos un paso.")
        if np.any(betas <= 0) or np.any(betas >= 1):
            raise ValueError("Cada β_t debe estar en (0, 1).")
        alphas = 1.0 - betas
        alpha_bars = np.cumprod(alphas)
        for arr in (betas, alphas, alpha_bars):
            arr.setflags(write=False)
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alphas", alphas)
        object.__setattr__(self, "alpha_bars", alpha_bars)

    @property
    def T(self) -> int:
        return self.betas.size

    def _check_t(self, t) -> np.ndarray:
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"El paso t debe estar en 1..{self.T}.")
        return t

    def alpha_bar(self, t) -> np.ndarray:
        """ᾱ_t con ᾱ_0 = 1."""
        t = np.asarray(t, dtype=np.int64)
        if np.any(t < 0) or np.any(t > self.T):
            raise ValueError(f"El paso t debe estar en 0..{self.T}.")
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[t]

    def posterior_variance(self, t: int) -> float:
        """β̃_t = β_t·(1 − ᾱ_{t−1})/(1 − ᾱ_t); vale 0 en t = 1."""
        t = int(self._check_t(t))
        return float(self.betas[t - 1] * (1.0 - self.alpha_bar(t - 1)) / (1.0 - self.alpha_bars[t - 1]))


def make_schedule(T: int, beta_start: float = 1e-4, beta_end: float = 2e-2) -> DiffusionSchedule:
    """
    Calendario lineal de β sobre t = 1..T.

    Raises:
        ValueError: T < 1 o rango de β fuera de 0 < β_start ≤ β_end < 1.
    """
    if int(T) < 1:
        raise ValueError("T debe ser ≥ 1.")
    if not 0 < beta_start <= beta_end < 1:
        raise ValueError(f"Rango de β inválido: [{beta_start}, {beta_end}]")
    if int(T) == 1:
        return DiffusionSchedule(np.array([beta_start]))
    return DiffusionSchedule(np.linspace(beta_start, beta_end, int(T)))


def q_sample(z0, t, eps, schedule: DiffusionSchedule) -> np.ndarray:
    """
    Difusión directa en forma cerrada.

    Args:
        z0 (np.ndarray): latentes (dim,) o (lote, dim).
        t (int | np.ndarray): paso por muestra, en 1..T.
        eps (np.ndarray): ruido con la forma de z0.
        schedule (DiffusionSchedule): calendario.
    """
    z0 = np.asarray(z0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if z0.shape != eps.shape:
        raise ValueError(f"z0 {z0.shape} y ε {eps.shape} deben tener la misma forma.")
    t = schedule._check_t(t)
    alpha_bar = schedule.alpha_bars[t - 1]
    if np.ndim(alpha_bar) == 1 and z0.ndim == 2:
        alpha_bar = alpha_bar[:, None]
    return np.sqrt(alpha_bar) * z0 + np.sqrt(1.0 - alpha_bar) * eps


# =============================================================================
# Modelo de eliminación de ruido
# =============================================================================
def timestep_embedding(t, dim: int = EMBED_DIM) -> np.ndarray:
    """Embedding sinusoidal [sin(t·ω_k), cos(t·ω_k)] con ω_k = 10000^(−k/(dim/2))."""
    if dim < 2 or dim % 2:
        raise ValueError("La dimensión del embedding debe ser par y ≥ 2.")
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(10000.0) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


@dataclass(frozen=True)
class DenoiserModel:
    mlp: MlpModel
    latent_dim: int
    embed_dim: int = EMBED_DIM

    def __post_init__(self):
        if self.mlp.widths[0] != self.latent_dim + self.embed_dim or self.mlp.widths[-1] != self.latent_dim:
            raise ValueError(f"Anchos {self.mlp.widths} incompatibles con latent_dim={self.latent_dim}, "
                             f"embed_dim={self.embed_dim}.")

    def _inputs(self, z_t, t) -> np.ndarray:
        z_t = np.atleast_2d(np.asarray(z_t, dtype=np.float64))
        if z_t.shape[1] != self.latent_dim:
            raise ValueError(f"Latente de dimensión {z_t.shape[1]}, el modelo espera {self.latent_dim}.")
        t = np.broadcast_to(np.asarray(t), (z_t.shape[0],))
        return np.concatenate([z_t, timestep_embedding(t, self.embed_dim)], axis=1)

    def predict(self, z_t, t) -> np.ndarray:
        return mlp_forward(self.mlp, self._inputs(z_t, t))

    def backward(self, z_t, t, output_gradient) -> List[np.ndarray]:
        return mlp_backward(self.mlp, self._inputs(z_t, t), None, output_gradient)

    def with_mlp(self, mlp: MlpModel) -> "DenoiserModel":
        return DenoiserModel(mlp, self.latent_dim, self.embed_dim)


def init_denoiser(latent_dim: int, hidden: Sequence[int] = (64, 64), embed_dim: int = EMBED_DIM,
                  seed: int = 0) -> DenoiserModel:
    widths = (latent_dim + embed_dim, *hidden, latent_dim)
    return DenoiserModel(init_mlp(widths, seed=seed), int(latent_dim), int(embed_dim))


# =============================================================================
# Objetivo de entrenamiento
# =============================================================================
def draw_training_noise(batch: int, dim: int, T: int, seed: int, *stream: int) -> Tuple[np.ndarray, np.ndarray]:
    """Pasos t uniformes en {1..T} y ruido ε (lote, dim), en ese orden, del generador (seed, *stream)."""
    gen = make_generator(seed, *stream)
    t = gen.integers(1, T + 1, size=batch)
    eps = standard_normal(gen, (batch, dim))
    return t, eps


def ldm_loss(denoiser, z0, schedule: DiffusionSchedule, seed: int,
             stream: Sequence[int] = ()) -> Tuple[float, List[np.ndarray]]:
    """
    Error cuadrático medio entre ε y ε̂(z_t, t) sobre lote × dimensión.

    `denoiser` necesita `predict(z_t, t)` y `backward(z_t, t, grad)`.

    Returns:
        tuple: (pérdida, gradientes en el orden de los parámetros del MLP)
    """
    z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    if z0.shape[0] == 0:
        raise ValueError("El lote de latentes está vacío.")
    batch, dim = z0.shape
    t, eps = draw_training_noise(batch, dim, schedule.T, seed, *stream)
    z_t = q_sample(z0, t, eps, schedule)
    pred = np.asarray(denoiser.predict(z_t, t), dtype=np.float64)
    if pred.shape != eps.shape:
        raise ValueError(f"El modelo predijo {pred.shape}, se esperaba {eps.shape}.")
    diff = pred - eps
    loss = float(np.mean(diff * diff))
    grads = denoiser.backward(z_t, t, 2.0 * diff / diff.size)
    return loss, grads


# =============================================================================
# Muestreo ancestral
# =============================================================================
def ddpm_sample(denoiser, schedule: DiffusionSchedule, dim: int, n: int, seed: int) -> np.ndarray:
    """
    z_T ~ N(0, I) y, para t = T..1,
    z_{t−1} = (z_t − β_t/√(1−ᾱ_t)·ε̂)/√α_t + √β̃_t·ξ.

    Returns:
        np.ndarray: (n, dim)
    """
    if getattr(denoiser, "latent_dim", dim) != dim:
        raise ValueError(f"dim={dim} no coincide con el modelo ({denoiser.latent_dim}).")
    gen = make_generator(seed)
    z = standard_normal(gen, (int(n), int(dim)))
    for t in range(schedule.T, 0, -1):
        beta = schedule.betas[t - 1]
        eps_hat = np.asarray(denoiser.predict(z, np.full(z.shape[0], t)), dtype=np.float64)
        mean = (z - beta / np.sqrt(1.0 - schedule.alpha_bars[t - 1]) * eps_hat) / np.sqrt(schedule.alphas[t - 1])
        if t > 1:
            z = mean + np.sqrt(schedule.posterior_variance(t)) * standard_normal(gen, z.shape)
        else:
            z = mean
    return z


# =============================================================================
# Entrenamiento
# =============================================================================
@dataclass(frozen=True)
class TrainConfig:
    hidden: Tuple[int, ...] = (64, 64)
    embed_dim: int = EMBED_DIM
    batch_size: int = 16
    epochs: int = 100
    lr: float = 1e-3
    seed: int = 0
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    ema_decay: float = 0.0
    log_every: int = 10

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size y epochs deben ser ≥ 1.")
        if self.lr <= 0:
            raise ValueError("lr debe ser positiva.")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay debe estar en [0, 1).")

    @classmethod
    def from_mapping(cls, section: Optional[dict], **overrides) -> "TrainConfig":
        values = dict(section or {})
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"Claves desconocidas en [diffusion]: {sorted(unknown)}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def schedule(self) -> DiffusionSchedule:
        return make_schedule(self.timesteps, self.beta_start, self.beta_end)

    def schedule_record(self) -> dict:
        """Parámetros del calendario tal como se guardan en el encabezado .mlp."""
        return {"timesteps": int(self.timesteps), "beta_start": float(self.beta_start),
                "beta_end": float(self.beta_end)}


def train_toy(dataset, schedule: DiffusionSchedule, config: TrainConfig = TrainConfig(),
              model: Optional[DenoiserModel] = None) -> Tuple[DenoiserModel, pd.DataFrame]:
    """
    Entrena el modelo con mini-lotes de ldm_loss y Adam.

    El orden de los lotes se baraja por época con el generador (seed, época) y el
    ruido de cada paso usa el flujo (seed, época, paso). Con ema_decay > 0 se
    devuelve el promedio móvil exponencial de los pesos, con decaimiento
    min(ema_decay, (1 + k)/(10 + k)) en el paso k; la traza de pérdida siempre
    corresponde a los pesos que optimiza Adam.

    Args:
        dataset (np.ndarray): latentes (n, dim), n ≥ 1.
        schedule (DiffusionSchedule): calendario de ruido.
        config (TrainConfig): hiperparámetros.
        model (DenoiserModel, optional): punto de partida; por defecto init_denoiser.

    Returns:
        tuple: (modelo final, DataFrame con columnas epoch y loss)
    """
    data = np.atleast_2d(np.asarray(dataset, dtype=np.float64))
    if data.shape[0] == 0:
        raise ValueError("El conjunto de latentes está vacío.")
    if not np.all(np.isfinite(data)):
        raise ValueError("El conjunto de latentes contiene valores no finitos.")
    n, dim = data.shape
    if model is None:
        model = init_denoiser(dim, config.hidden, config.embed_dim, config.seed)
    params = model.mlp.parameters()
    state = init_optimizer(params, config.lr)
    averaged = [np.array(p, dtype=np.float64) for p in params] if config.ema_decay > 0 else None

    trace = []
    for epoch in range(config.epochs):
        order = make_generator(config.seed, epoch).permutation(n)
        losses = []
        for step, start in enumerate(range(0, n, config.batch_size)):
            batch = data[order[start:start + config.batch_size]]
            loss, grads = ldm_loss(model, batch, schedule, config.seed, stream=(epoch, step))
            params, state = optimizer_step(state, params, grads)
            model = model.with_mlp(model.mlp.with_parameters(params))
            if averaged is not None:
                decay = min(config.ema_decay, (1.0 + state.step) / (10.0 + state.step))
                averaged = [decay * a + (1.0 - decay) * p for a, p in zip(averaged, params)]
            losses.append(loss)
        mean_loss = float(np.mean(losses))
        trace.append({"epoch": epoch + 1, "loss": mean_loss})
        if config.log_every and (epoch + 1) % config.log_every == 0:
            logger.info("Época %d/%d: pérdida media %.6f", epoch + 1, config.epochs, mean_loss)
    if averaged is not None:
        model = model.with_mlp(model.mlp.with_parameters(averaged))
    return model, pd.DataFrame(trace, columns=["epoch", "loss"])


# =============================================================================
# Datos de juguete
# =============================================================================
def make_mixture_dataset(kind: str, n: int, seed: int, mode_offset: float = 2.0,
                         mode_std: float = 0.4) -> np.ndarray:
    """
    'normal2d': N(0, I) en 2-D. 'mix2d': mezcla equiprobable de N(±(offset, offset), std²·I).
    """
    if kind not in MIXTURE_KINDS:
        raise ValueError(f"Tipo de conjunto desconocido: {kind!r} (opciones: {MIXTURE_KINDS})")
    if n < 1:
        raise ValueError("n debe ser ≥ 1.")
    gen = make_generator(seed)
    noise = standard_normal(gen, (int(n), 2))
    if kind == "normal2d":
        return noise
    signs = np.where(gen.random(int(n)) < 0.5, -1.0, 1.0)
    return signs[:, None] * mode_offset + mode_std * noise


def latents_from_factor(g: GaussianFactor, n: int, seed: int) -> np.ndarray:
    """n latentes z ~ q(z) a partir de un factor gaussiano (p. ej. fusionado)."""
    return sample_gaussian(g, seed, n)
