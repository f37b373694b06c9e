# app/nn.py
"""
Herramientas mínimas de redes con gradientes manuales

Contiene:
  1. group_norm y adagn (s·GroupNorm(h) + b).
  2. MlpModel: perceptrón multicapa con activación SiLU y, opcionalmente, una
     cabeza de condicionamiento que produce un par (s, b) por capa oculta a
     partir de (TE, TR, TI).
  3. mlp_forward / mlp_backward: pase hacia adelante y diferenciación en modo
     reverso exacta (incluye las estadísticas de group norm y la cabeza).
  4. OptimizerState / optimizer_step: Adam con corrección de sesgo.

Los tensores ocultos de una muestra se tratan como [canales, 1] para group norm.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from app.core import AcquisitionParams
from app.rng import make_generator

logger = logging.getLogger(__name__)

GROUP_NORM_EPS = 1e-5
ACTIVATIONS = ("silu",)


# =============================================================================
# Activación
# =============================================================================
def silu(z: np.ndarray) -> np.ndarray:
    return z * expit(z)


def silu_grad(z: np.ndarray) -> np.ndarray:
    sig = expit(z)
    return sig * (1.0 + z * (1.0 - sig))


# =============================================================================
# Group norm y AdaGN
# =============================================================================
def _group_stats(h: np.ndarray, groups: int, eps: float):
    h = np.asarray(h, dtype=np.float64)
    if h.ndim < 2:
        raise ValueError("group_norm espera un tensor [..., canales, n].")
    channels = h.shape[-2]
    if groups < 1 or channels % groups:
        raise ValueError(f"{channels} canales no son divisibles en {groups} grupos.")
    grouped = h.reshape(h.shape[:-2] + (groups, -1))
    mean = grouped.mean(axis=-1, keepdims=True)
    centered = grouped - mean
    var = np.mean(centered * centered, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    return grouped, centered * inv_std, inv_std


def group_norm(h: np.ndarray, groups: int, eps: float = GROUP_NORM_EPS) -> np.ndarray:
    """
    Normaliza cada grupo de canales (canales del grupo × posiciones) a media 0 y varianza 1.

    Args:
        h (np.ndarray): tensor [..., canales, n].
        groups (int): número de grupos; debe dividir a canales.
        eps (float): estabilizador de la varianza.

    Returns:
        np.ndarray: tensor con la misma forma.
    """
    h = np.asarray(h, dtype=np.float64)
    _, normalized, _ = _group_stats(h, groups, eps)
    return normalized.reshape(h.shape)


def _group_norm_backward(d_out: np.ndarray, normalized: np.ndarray, inv_std: np.ndarray) -> np.ndarray:
    shape = d_out.shape
    d_hat = d_out.reshape(normalized.shape)
    mean_d = d_hat.mean(axis=-1, keepdims=True)
    mean_dx = np.mean(d_hat * normalized, axis=-1, keepdims=True)
    return (inv_std * (d_hat - mean_d - normalized * mean_dx)).reshape(shape)


def adagn(h: np.ndarray, s, b, groups: int, eps: float = GROUP_NORM_EPS) -> np.ndarray:
    """
    Normalización de grupo adaptativa: s · GroupNorm(h) + b.

    s y b deben poder difundirse (broadcast) sobre h.
    """
    normalized = group_norm(h, groups, eps)
    s = np.asarray(s, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    try:
        np.broadcast_shapes(normalized.shape, s.shape, b.shape)
    except ValueError as e:
        raise ValueError(f"s/b no son compatibles con h {normalized.shape}: {e}") from e
    return s * normalized + b


# =============================================================================
# Modelo
# =============================================================================
@dataclass(frozen=True)
class MlpModel:
    """
    Perceptrón multicapa. weights[l] tiene forma (salida, entrada).

    Si cond_dim > 0, head_weight (2·ocultas, cond_dim) y head_bias producen
    (s_l, b_l) para cada capa oculta l.
    """
    widths: Tuple[int, ...]
    weights: Tuple[np.ndarray, ...] = field(repr=False)
    biases: Tuple[np.ndarray, ...] = field(repr=False)
    activation: str = "silu"
    cond_dim: int = 0
    groups: int = 1
    seed: int = 0
    head_weight: Optional[np.ndarray] = field(default=None, repr=False)
    head_bias: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        widths = tuple(int(w) for w in self.widths)
        if len(widths) < 2 or any(w < 1 for w in widths):
            raise ValueError(f"Anchos inválidos: {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"Activación no soportada: {self.activation}")
        if len(self.weights) != len(widths) - 1 or len(self.biases) != len(widths) - 1:
            raise ValueError("El número de capas no coincide con los anchos.")
        for l, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (widths[l + 1], widths[l]) or b.shape != (widths[l + 1],):
                raise ValueError(f"Forma incorrecta en la capa {l}: {w.shape}, {b.shape}")
        params = list(self.weights) + list(self.biases)
        if self.cond_dim:
            hidden = len(widths) - 2
            if any(w % self.groups for w in widths[1:-1]):
                raise ValueError(f"Los anchos ocultos deben ser divisibles entre groups={self.groups}.")
            if self.head_weight is None or self.head_weight.shape != (2 * hidden, self.cond_dim):
                raise ValueError("La cabeza de condicionamiento no tiene la forma (2·ocultas, cond_dim).")
            if self.head_bias is None or self.head_bias.shape != (2 * hidden,):
                raise ValueError("El sesgo de la cabeza no tiene la forma (2·ocultas,).")
            params += [self.head_weight, self.head_bias]
        if not all(np.all(np.isfinite(p)) for p in params):
            raise ValueError("Los parámetros del modelo contienen valores no finitos.")
        object.__setattr__(self, "widths", widths)
        object.__setattr__(self, "weights", tuple(self.weights))
        object.__setattr__(self, "biases", tuple(self.biases))

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def n_hidden(self) -> int:
        return len(self.widths) - 2

    def parameters(self) -> List[np.ndarray]:
        """Orden canónico: W0, b0, W1, b1, ..., [head_weight, head_bias]."""
        params = []
        for w, b in zip(self.weights, self.biases):
            params += [w, b]
        if self.cond_dim:
            params += [self.head_weight, self.head_bias]
        return params

    def with_parameters(self, params: Sequence[np.ndarray]) -> "MlpModel":
        params = [np.asarray(p, dtype=np.float64) for p in params]
        expected = 2 * self.n_layers + (2 if self.cond_dim else 0)
        if len(params) != expected:
            raise ValueError(f"Se esperaban {expected} arreglos de parámetros, recibidos {len(params)}.")
        layers = params[:2 * self.n_layers]
        head = params[2 * self.n_layers:]
        return replace(self, weights=tuple(layers[0::2]), biases=tuple(layers[1::2]),
                       head_weight=head[0] if head else None, head_bias=head[1] if head else None)


def init_mlp(widths: Sequence[int], cond_dim: int = 0, groups: int = 1, seed: int = 0,
             activation: str = "silu") -> MlpModel:
    """
    Inicializa pesos uniformes en ±√(6/(fan_in+fan_out)) con el generador sembrado; sesgos en cero.

    La cabeza de condicionamiento arranca con sesgo s = 1, b = 0.
    """
    widths = tuple(int(w) for w in widths)
    weights, biases = [], []
    for l in range(len(widths) - 1):
        fan_in, fan_out = widths[l], widths[l + 1]
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        gen = make_generator(seed, l)
        weights.append(gen.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    head_weight = head_bias = None
    if cond_dim:
        hidden = len(widths) - 2
        limit = np.sqrt(6.0 / (cond_dim + 2 * hidden))
        head_weight = make_generator(seed, len(widths)).uniform(-limit, limit, size=(2 * hidden, cond_dim))
        head_bias = np.zeros(2 * hidden)
        head_bias[0::2] = 1.0
    return MlpModel(widths, tuple(weights), tuple(biases), activation, int(cond_dim), int(groups), int(seed),
                    head_weight, head_bias)


def zero_output_layer(model: MlpModel) -> MlpModel:
    params = model.parameters()
    last = 2 * (model.n_layers - 1)
    params[last] = np.zeros_like(params[last])
    params[last + 1] = np.zeros_like(params[last + 1])
    return model.with_parameters(params)


# =============================================================================
# Pase hacia adelante y hacia atrás
# =============================================================================
def _condition_matrix(model: MlpModel, condition, batch: int) -> Optional[np.ndarray]:
    if not model.cond_dim:
        if condition is not None:
            raise ValueError("El modelo no tiene cabeza de condicionamiento.")
        return None
    if condition is None:
        raise ValueError("El modelo requiere un condicionamiento (TE, TR, TI).")
    if isinstance(condition, AcquisitionParams):
        condition = condition.as_vector()
    cond = np.asarray(condition, dtype=np.float64)
    if cond.ndim == 1:
        cond = np.broadcast_to(cond, (batch, cond.size))
    if cond.shape != (batch, model.cond_dim):
        raise ValueError(f"Condicionamiento con forma {cond.shape}, se esperaba ({batch}, {model.cond_dim}).")
    return cond


def _as_batch(model: MlpModel, x) -> Tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != model.widths[0]:
        raise ValueError(f"Entrada de ancho {x.shape[-1]}, el modelo espera {model.widths[0]}.")
    return x, single


def _forward(model: MlpModel, x: np.ndarray, cond: Optional[np.ndarray]):
    cache = {"inputs": [], "pre": [], "norm": [], "inv_std": [], "scale": [], "shift": []}
    head = cond @ model.head_weight.T + model.head_bias if cond is not None else None
    cache["cond"] = cond
    h = x
    for l in range(model.n_layers):
        cache["inputs"].append(h)
        z = h @ model.weights[l].T + model.biases[l]
        if l == model.n_layers - 1:
            return z, cache
        if head is not None:
            s = head[:, 2 * l][:, None]
            b = head[:, 2 * l + 1][:, None]
            _, normalized, inv_std = _group_stats(z[:, :, None], model.groups, GROUP_NORM_EPS)
            z_hat = normalized.reshape(z.shape)
            cache["norm"].append(normalized)
            cache["inv_std"].append(inv_std)
            cache["scale"].append(s)
            z = s * z_hat + b
        cache["pre"].append(z)
        h = silu(z)
    raise AssertionError("inalcanzable")


def mlp_forward(model: MlpModel, x, condition=None) -> np.ndarray:
    """
    Pase hacia adelante determinista.

    Args:
        model (MlpModel): red.
        x (np.ndarray): entrada (ancho,) o (lote, ancho).
        condition: AcquisitionParams, vector (cond_dim,) o matriz (lote, cond_dim).

    Returns:
        np.ndarray: salida con la misma dimensión de lote que la entrada.
    """
    batch, single = _as_batch(model, x)
    out, _ = _forward(model, batch, _condition_matrix(model, condition, batch.shape[0]))
    return out[0] if single else out


def mlp_backward(model: MlpModel, x, condition, output_gradient) -> List[np.ndarray]:
    """
    Gradientes exactos de ⟨salida, output_gradient⟩ respecto a cada parámetro,
    sumados sobre el lote, en el orden de model.parameters().
    """
    batch, single = _as_batch(model, x)
    cond = _condition_matrix(model, condition, batch.shape[0])
    out, cache = _forward(model, batch, cond)
    d_out = np.asarray(output_gradient, dtype=np.float64)
    if single:
        d_out = d_out[None]
    if d_out.shape != out.shape:
        raise ValueError(f"output_gradient con forma {d_out.shape}, se esperaba {out.shape}.")

    grads_w = [None] * model.n_layers
    grads_b = [None] * model.n_layers
    d_head = np.zeros((batch.shape[0], 2 * model.n_hidden)) if cond is not None else None
    dz = d_out
    for l in range(model.n_layers - 1, -1, -1):
        h = cache["inputs"][l]
        grads_w[l] = dz.T @ h
        grads_b[l] = dz.sum(axis=0)
        if l == 0:
            break
        dh = dz @ model.weights[l]
        # capa oculta l-1: h = silu(pre)
        k = l - 1
        d_pre = dh * silu_grad(cache["pre"][k])
        if cond is not None:
            normalized = cache["norm"][k]
            z_hat = normalized.reshape(d_pre.shape)
            d_head[:, 2 * k] = np.sum(d_pre * z_hat, axis=1)
            d_head[:, 2 * k + 1] = np.sum(d_pre, axis=1)
            d_hat = d_pre * cache["scale"][k]
            d_pre = _group_norm_backward(d_hat[:, :, None], normalized, cache["inv_std"][k]).reshape(d_pre.shape)
        dz = d_pre

    grads = []
    for gw, gb in zip(grads_w, grads_b):
        grads += [gw, gb]
    if cond is not None:
        grads += [d_head.T @ cond, d_head.sum(axis=0)]
    return grads


def mlp_input_gradient(model: MlpModel, x, condition, output_gradient) -> np.ndarray:
    """Gradiente respecto a la entrada (útil para pruebas de consistencia)."""
    batch, single = _as_batch(model, x)
    cond = _condition_matrix(model, condition, batch.shape[0])
    _, cache = _forward(model, batch, cond)
    dz = np.asarray(output_gradient, dtype=np.float64)
    dz = dz[None] if single else dz
    for l in range(model.n_layers - 1, 0, -1):
        d_pre = (dz @ model.weights[l]) * silu_grad(cache["pre"][l - 1])
        if cond is not None:
            normalized = cache["norm"][l - 1]
            d_hat = d_pre * cache["scale"][l - 1]
            d_pre = _group_norm_backward(d_hat[:, :, None], normalized, cache["inv_std"][l - 1]).reshape(d_pre.shape)
        dz = d_pre
    dx = dz @ model.weights[0]
    return dx[0] if single else dx


# =============================================================================
# Optimizador Adam
# =============================================================================
@dataclass(frozen=True)
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Tuple[np.ndarray, ...] = field(default=(), repr=False)
    second_moment: Tuple[np.ndarray, ...] = field(default=(), repr=False)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("La tasa de aprendizaje debe ser positiva.")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Las tasas de decaimiento deben estar en [0, 1).")
        if self.step < 0:
            raise ValueError("step debe ser ≥ 0.")


def init_optimizer(params: Sequence[np.ndarray], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                   eps: float = 1e-8) -> OptimizerState:
    zeros = tuple(np.zeros_like(p, dtype=np.float64) for p in params)
    return OptimizerState(lr, beta1, beta2, eps, 0, zeros, tuple(np.zeros_like(z) for z in zeros))


def optimizer_step(state: OptimizerState, params: Sequence[np.ndarray],
                   grads: Sequence[np.ndarray]) -> Tuple[List[np.ndarray], OptimizerState]:
    """
    Paso de Adam con corrección de sesgo.

    Returns:
        tuple: (parámetros nuevos, estado nuevo); las entradas no se modifican.
    """
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ValueError("Parámetros, gradientes y acumuladores deben tener la misma longitud.")
    step = state.step + 1
    correction1 = 1.0 - state.beta1 ** step
    correction2 = 1.0 - state.beta2 ** step
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        g = np.asarray(g, dtype=np.float64)
        if g.shape != p.shape or m.shape != p.shape:
            raise ValueError(f"Forma de gradiente {g.shape} distinta de la del parámetro {p.shape}.")
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * g * g
        m_hat = m / correction1
        v_hat = v / correction2
        new_params.append(p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return new_params, replace(state, step=step, first_moment=tuple(new_m), second_moment=tuple(new_v))
