# app/qmap.py
"""
Módulo de mapeo cuantitativo (PD, T1, T2)

Estimación MAP voxel a voxel de las propiedades de tejido a partir de varios
contrastes observados, bajo los priors log-normales sobre T1 y T2:

    PD = exp(o_pd)
    T1 = exp(o_t1 + b_T1)
    T2 = exp(o_t2 + b_T2)

    objetivo(θ) = Σ_j (s_modelo(θ; params_j) − s_obs_j)² + λ·(o_t1² + o_t2²)

La minimización usa Levenberg–Marquardt en el espacio θ con el jacobiano
analítico de signal_models (regla de la cadena a través de la exponencial).
El núcleo trabaja por lotes de voxeles, pero cada voxel conserva su propio
amortiguamiento, aceptación y conteo de iteraciones, por lo que el resultado de
un voxel no depende de con cuáles otros se procese.
"""

from __future__ import annotations

import logging
import math
import multiprocessing
from dataclasses import asdict, dataclass, fields
from typing import Optional, Sequence, Tuple

import numpy as np

from app.core import AcquisitionParams, PropertyMap, Volume
from app.signal_models import signal_jacobian, signal_value

logger = logging.getLogger(__name__)

MAX_PROPERTY_VALUE = 1e6
MIN_RELAXATION = 1e-6
MIN_INITIAL_PD = 1e-8
MAX_DAMPING = 1e16

Observation = Tuple[float, AcquisitionParams]


# =============================================================================
# Configuración y resultado
# =============================================================================
@dataclass(frozen=True)
class FitConfig:
    """
    Configuración del ajuste MAP.

    Los priors se guardan como medianas (segundos); b = ln(mediana) se expone
    como prior_bias_t1 / prior_bias_t2. Con θ = 0 el ajuste regresa exactamente
    las medianas.
    """
    prior_median_t1: float = 1.0
    prior_median_t2: float = 0.1
    prior_weight: float = 1e-2
    max_iterations: int = 50
    initial_damping: float = 1e-3
    convergence_tol: float = 1e-10
    pd_floor: float = 0.0
    init: str = "prior"
    chunk_size: int = 4096

    def __post_init__(self):
        if self.prior_weight < 0:
            raise ValueError("prior_weight (λ) debe ser ≥ 0.")
        if self.max_iterations < 1:
            raise ValueError("max_iterations debe ser ≥ 1.")
        if self.initial_damping <= 0:
            raise ValueError("initial_damping debe ser > 0.")
        if self.prior_median_t1 <= 0 or self.prior_median_t2 <= 0:
            raise ValueError("Las medianas del prior deben ser positivas.")
        if self.init not in ("prior", "grid"):
            raise ValueError(f"init debe ser 'prior' o 'grid', recibido {self.init!r}.")
        if self.chunk_size < 1:
            raise ValueError("chunk_size debe ser ≥ 1.")
        if self.pd_floor < 0:
            raise ValueError("pd_floor debe ser ≥ 0.")

    @property
    def prior_bias_t1(self) -> float:
        return math.log(self.prior_median_t1)

    @property
    def prior_bias_t2(self) -> float:
        return math.log(self.prior_median_t2)

    @classmethod
    def from_mapping(cls, section: Optional[dict], **overrides) -> "FitConfig":
        """
        Construye la configuración desde la sección [fit] del TOML.

        Acepta prior_bias_t1/prior_bias_t2 (log-segundos) como alternativa a las medianas.
        """
        values = dict(section or {})
        values.update({k: v for k, v in overrides.items() if v is not None})
        for channel in ("t1", "t2"):
            bias = values.pop(f"prior_bias_{channel}", None)
            if bias is not None:
                values[f"prior_median_{channel}"] = math.exp(float(bias))
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"Claves desconocidas en [fit]: {sorted(unknown)}")
        return cls(**values)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class FitResult:
    """Mapas ajustados y diagnósticos por voxel (arreglos con forma (nz, ny, nx))."""
    props: PropertyMap
    residual: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray

    @property
    def convergence_rate(self) -> float:
        return float(np.mean(self.converged))

    def summary(self) -> dict:
        return {
            "voxels": int(self.converged.size),
            "convergence_rate": self.convergence_rate,
            "non_converged": int(np.count_nonzero(~self.converged)),
            "median_residual": float(np.median(self.residual)),
            "median_iterations": float(np.median(self.iterations)),
            "max_iterations_used": int(np.max(self.iterations)),
        }


# =============================================================================
# Parametrización exponencial
# =============================================================================
def parameterize(o_pd, o_t1, o_t2, config: FitConfig = FitConfig()):
    """
    Mapea salidas no restringidas a propiedades positivas.

    Los valores se saturan en MAX_PROPERTY_VALUE (1e6); T1 y T2 además tienen
    un piso de MIN_RELAXATION (1e-6 s).

    Returns:
        tuple: (pd, t1, t2)
    """
    o_pd, o_t1, o_t2 = (np.asarray(o, dtype=np.float64) for o in (o_pd, o_t1, o_t2))
    log_max = math.log(MAX_PROPERTY_VALUE)
    pd = np.exp(np.minimum(o_pd, log_max))
    t1 = config.prior_median_t1 * np.exp(np.minimum(o_t1, log_max - config.prior_bias_t1))
    t2 = config.prior_median_t2 * np.exp(np.minimum(o_t2, log_max - config.prior_bias_t2))
    t1 = np.maximum(t1, MIN_RELAXATION)
    t2 = np.maximum(t2, MIN_RELAXATION)
    if pd.ndim == 0:
        return float(pd), float(t1), float(t2)
    return pd, t1, t2


def unparameterize(pd, t1, t2, config: FitConfig = FitConfig()):
    """Inversa logarítmica de parameterize."""
    return (np.log(pd), np.log(np.asarray(t1) / config.prior_median_t1),
            np.log(np.asarray(t2) / config.prior_median_t2))


# -----------------------------------------------------------------------------
# Evaluación por lotes: residuales y jacobiano en el espacio θ
# -----------------------------------------------------------------------------
def _residuals_and_jacobian(theta: np.ndarray, y: np.ndarray, protocol: Sequence[AcquisitionParams],
                            config: FitConfig, with_jacobian: bool = True):
    n, m = y.shape
    pd, t1, t2 = parameterize(theta[:, 0], theta[:, 1], theta[:, 2], config)
    r = np.empty((n, m))
    J = np.empty((n, m, 3)) if with_jacobian else None
    for j, params in enumerate(protocol):
        r[:, j] = signal_value(pd, t1, t2, params) - y[:, j]
        if with_jacobian:
            d_pd, d_t1, d_t2 = signal_jacobian(pd, t1, t2, params)
            J[:, j, 0] = d_pd * pd
            J[:, j, 1] = d_t1 * t1
            J[:, j, 2] = d_t2 * t2
    return r, J


def _objective(r: np.ndarray, theta: np.ndarray, weight: float) -> np.ndarray:
    total = np.zeros(r.shape[0])
    for j in range(r.shape[1]):
        total = total + r[:, j] * r[:, j]
    return total + weight * (theta[:, 1] * theta[:, 1] + theta[:, 2] * theta[:, 2])


def _normal_equations(r: np.ndarray, J: np.ndarray, theta: np.ndarray, weight: float):
    n, m = r.shape
    A = np.zeros((n, 3, 3))
    g = np.zeros((n, 3))
    for j in range(m):
        A = A + J[:, j, :, None] * J[:, j, None, :]
        g = g + J[:, j, :] * r[:, j, None]
    A[:, 1, 1] += weight
    A[:, 2, 2] += weight
    g[:, 1] += weight * theta[:, 1]
    g[:, 2] += weight * theta[:, 2]
    return A, g


def map_objective(theta, observations: Sequence[Observation], config: FitConfig = FitConfig()) -> float:
    """
    Objetivo MAP de un voxel: suma de residuales al cuadrado + λ·(o_t1² + o_t2²).

    PD no se regulariza: el prior solo aplica a T1 y T2.

    Raises:
        ValueError: sin observaciones y λ = 0 ("unidentifiable").
    """
    y, protocol = _split_observations(observations, config)
    theta = np.asarray(theta, dtype=np.float64).reshape(1, 3)
    r, _ = _residuals_and_jacobian(theta, y, protocol, config, with_jacobian=False)
    return float(_objective(r, theta, config.prior_weight)[0])


def map_gradient(theta, observations: Sequence[Observation], config: FitConfig = FitConfig()) -> np.ndarray:
    """Gradiente analítico del objetivo MAP respecto a θ (regla de la cadena)."""
    y, protocol = _split_observations(observations, config)
    theta = np.asarray(theta, dtype=np.float64).reshape(1, 3)
    r, J = _residuals_and_jacobian(theta, y, protocol, config)
    _, g = _normal_equations(r, J, theta, config.prior_weight)
    return 2.0 * g[0]


def _split_observations(observations: Sequence[Observation], config: FitConfig):
    observations = list(observations)
    if not observations and config.prior_weight == 0:
        raise ValueError("unidentifiable: sin observaciones y con λ = 0.")
    values = np.array([float(s) for s, _ in observations], dtype=np.float64).reshape(1, -1)
    if not np.all(np.isfinite(values)):
        raise ValueError("Las observaciones contienen valores no finitos.")
    protocol = [params for _, params in observations]
    return values, protocol


# =============================================================================
# Inicialización
# =============================================================================
def _initial_theta(y: np.ndarray, protocol: Sequence[AcquisitionParams], config: FitConfig) -> np.ndarray:
    n, m = y.shape
    theta = np.zeros((n, 3))
    if m == 0:
        return theta
    if config.init == "grid":
        return _grid_theta(y, protocol, config)
    # θ en las medianas del prior; o_pd desde la señal media observada
    unit = np.array([abs(float(signal_value(1.0, config.prior_median_t1, config.prior_median_t2, p)))
                     for p in protocol])
    mean_model = unit.mean()
    mean_obs = np.abs(y).mean(axis=1)
    pd0 = mean_obs / mean_model if mean_model > 0 else mean_obs
    theta[:, 0] = np.log(np.maximum(pd0, MIN_INITIAL_PD))
    return theta


def _grid_theta(y: np.ndarray, protocol: Sequence[AcquisitionParams], config: FitConfig,
                nodes: int = 24) -> np.ndarray:
    """Búsqueda en malla log-espaciada (T1, T2) con PD resuelto en forma cerrada."""
    t1_grid = np.logspace(np.log10(0.05), np.log10(6.0), nodes)
    t2_grid = np.logspace(np.log10(0.005), np.log10(3.0), nodes)
    T1, T2 = (g.ravel() for g in np.meshgrid(t1_grid, t2_grid, indexing="ij"))
    basis = np.stack([signal_value(1.0, T1, T2, p) for p in protocol], axis=1)  # (G, m)
    bb = np.sum(basis * basis, axis=1)
    by = y @ basis.T  # (n, G)
    pd = np.maximum(by / np.where(bb > 0, bb, 1.0), MIN_INITIAL_PD)
    o_t1 = np.log(T1 / config.prior_median_t1)
    o_t2 = np.log(T2 / config.prior_median_t2)
    cost = (np.sum(y * y, axis=1)[:, None] - 2.0 * pd * by + pd * pd * bb
            + config.prior_weight * (o_t1 ** 2 + o_t2 ** 2))
    best = np.argmin(cost, axis=1)
    return np.column_stack([np.log(pd[np.arange(y.shape[0]), best]), o_t1[best], o_t2[best]])


# =============================================================================
# Levenberg–Marquardt por lotes
# =============================================================================
def _lm_batch(y: np.ndarray, protocol: Sequence[AcquisitionParams], config: FitConfig,
              theta0: np.ndarray):
    """
    Minimiza el objetivo MAP de cada fila de `y` de forma independiente.

    Returns:
        tuple: (theta, objetivo, residual, iteraciones, convergido)
    """
    n = y.shape[0]
    weight = config.prior_weight
    theta = np.array(theta0, dtype=np.float64)
    r, J = _residuals_and_jacobian(theta, y, protocol, config)
    f = _objective(r, theta, weight)
    mu = np.full(n, config.initial_damping)
    iterations = np.zeros(n, dtype=np.int64)
    done = np.zeros(n, dtype=bool)
    converged = np.zeros(n, dtype=bool)
    eye = np.eye(3)

    for _ in range(config.max_iterations):
        idx = np.flatnonzero(~done)
        if idx.size == 0:
            break
        A, g = _normal_equations(r[idx], J[idx], theta[idx], weight)
        flat = np.max(np.abs(g), axis=1) <= 1e-15 * (1.0 + f[idx])
        if np.any(flat):
            done[idx[flat]] = True
            converged[idx[flat]] = True
            idx, A, g = idx[~flat], A[~flat], g[~flat]
            if idx.size == 0:
                break

        step = -np.linalg.solve(A + mu[idx, None, None] * eye, g[:, :, None])[:, :, 0]
        trial = theta[idx] + step
        r_t, J_t = _residuals_and_jacobian(trial, y[idx], protocol, config)
        f_t = _objective(r_t, trial, weight)
        iterations[idx] += 1

        accept = np.isfinite(f_t) & (f_t < f[idx])
        acc, rej = idx[accept], idx[~accept]
        decrease = f[acc] - f_t[accept]
        small = decrease <= config.convergence_tol * np.maximum(1.0, f[acc])

        theta[acc] = trial[accept]
        r[acc] = r_t[accept]
        J[acc] = J_t[accept]
        f[acc] = f_t[accept]
        mu[acc] = mu[acc] / 10.0
        mu[rej] = mu[rej] * 10.0

        done[acc[small]] = True
        converged[acc[small]] = True

        stalled = rej[mu[rej] > MAX_DAMPING]
        if stalled.size:
            _, g_s = _normal_equations(r[stalled], J[stalled], theta[stalled], weight)
            done[stalled] = True
            converged[stalled] = np.max(np.abs(g_s), axis=1) <= 1e-8 * (1.0 + f[stalled])

    residual = np.sqrt(np.sum(r * r, axis=1)) if r.shape[1] else np.zeros(n)
    return theta, f, residual, iterations, converged


def _fit_rows(y: np.ndarray, protocol: Sequence[AcquisitionParams], config: FitConfig,
              theta0: Optional[np.ndarray] = None):
    if theta0 is None:
        theta0 = _initial_theta(y, protocol, config)
    theta, f, residual, iterations, converged = _lm_batch(y, protocol, config, theta0)
    pd, t1, t2 = parameterize(theta[:, 0], theta[:, 1], theta[:, 2], config)
    pd = np.maximum(pd, config.pd_floor)
    return np.stack([pd, t1, t2], axis=1), f, residual, iterations, converged


def fit_voxel(observations: Sequence[Observation], config: FitConfig = FitConfig(),
              init: Optional[Sequence[float]] = None):
    """
    Ajusta (PD, T1, T2) de un voxel.

    Args:
        observations (list): pares (señal, AcquisitionParams).
        config (FitConfig): priors y parámetros de LM.
        init (tuple, optional): θ inicial (o_pd, o_t1, o_t2).

    Returns:
        tuple: (pd, t1, t2, diagnósticos) con diagnósticos = dict(objective, residual, iterations, converged).
    """
    y, protocol = _split_observations(observations, config)
    theta0 = None if init is None else np.asarray(init, dtype=np.float64).reshape(1, 3)
    values, f, residual, iterations, converged = _fit_rows(y, protocol, config, theta0)
    pd, t1, t2 = (float(v) for v in values[0])
    diagnostics = {
        "objective": float(f[0]),
        "residual": float(residual[0]),
        "iterations": int(iterations[0]),
        "converged": bool(converged[0]),
    }
    if not diagnostics["converged"]:
        logger.warning("fit_voxel no convergió en %d iteraciones", config.max_iterations)
    return pd, t1, t2, diagnostics


def _fit_chunk(job):
    y, protocol, config = job
    values, _, residual, iterations, converged = _fit_rows(y, protocol, config)
    return values, residual, iterations, converged


def fit_volume(images: Sequence[Tuple[Volume, AcquisitionParams]], config: FitConfig = FitConfig(),
               workers: int = 1) -> FitResult:
    """
    Ajuste independiente por voxel sobre un conjunto de contrastes co-registrados.

    Los voxeles se dividen en bloques de tamaño fijo (config.chunk_size); el
    resultado es idéntico para cualquier número de workers.

    Raises:
        ValueError: lista vacía, volúmenes multicanal o dimensiones distintas.
    """
    images = list(images)
    if not images:
        raise ValueError("fit_volume requiere al menos una imagen.")
    dims = images[0][0].dims
    for volume, _ in images:
        if volume.channels != 1:
            raise ValueError("Cada imagen de entrada debe tener un solo canal.")
        if volume.dims != dims:
            raise ValueError(f"Dimensiones inconsistentes: {volume.dims} vs {dims}.")
    protocol = [params for _, params in images]
    y = np.stack([volume.flat() for volume, _ in images], axis=1)
    jobs = [(y[start:start + config.chunk_size], protocol, config)
            for start in range(0, y.shape[0], config.chunk_size)]
    logger.info("Ajustando %d voxeles con %d contrastes (%d bloques, %d workers)",
                y.shape[0], len(protocol), len(jobs), workers)

    if workers > 1 and len(jobs) > 1:
        with multiprocessing.Pool(processes=min(workers, len(jobs))) as pool:
            parts = pool.map(_fit_chunk, jobs)
    else:
        parts = [_fit_chunk(job) for job in jobs]

    values = np.concatenate([p[0] for p in parts])
    nx, ny, nz = dims
    shape = (nz, ny, nx)
    props = PropertyMap(dims, ("PD", "T1", "T2"), values.T.reshape(3, nz, ny, nx))
    result = FitResult(
        props=props,
        residual=np.concatenate([p[1] for p in parts]).reshape(shape),
        iterations=np.concatenate([p[2] for p in parts]).reshape(shape),
        converged=np.concatenate([p[3] for p in parts]).reshape(shape),
    )
    summary = result.summary()
    logger.info("Ajuste terminado: convergencia %.4f, residual mediano %.3g",
                summary["convergence_rate"], summary["median_residual"])
    if summary["non_converged"]:
        logger.warning("%d voxeles no convergieron", summary["non_converged"])
    return result

