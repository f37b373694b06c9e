# app/fusion.py
"""
Fusión producto-de-expertos de posteriores gaussianas diagonales

Cada modalidad aporta un experto q(z|x_i) = N(μ_i, σ_i²). El producto de
gaussianas es otra gaussiana:

    1/σ² = Σ_i 1/σ_i²
    μ    = σ² · Σ_i μ_i/σ_i²

Las sumas se hacen sobre los términos ordenados por componente, de modo que el
resultado es idéntico bit a bit para cualquier orden de los expertos.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from app.rng import make_generator, standard_normal

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class GaussianFactor:
    """Gaussiana diagonal: media y varianza por componente (varianza > 0 y finita)."""
    mean: np.ndarray = field(repr=False)
    variance: np.ndarray = field(repr=False)

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64)).copy()
        variance = np.atleast_1d(np.asarray(self.variance, dtype=np.float64)).copy()
        if mean.ndim != 1 or mean.shape != variance.shape:
            raise ValueError(f"Media {mean.shape} y varianza {variance.shape} deben ser vectores de igual tamaño.")
        if not np.all(np.isfinite(mean)):
            raise ValueError("La media contiene valores no finitos.")
        if not np.all(np.isfinite(variance)) or np.any(variance <= 0):
            raise ValueError("Cada componente de la varianza debe ser positiva y finita.")
        mean.setflags(write=False)
        variance.setflags(write=False)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "variance", variance)

    @property
    def dim(self) -> int:
        return self.mean.size

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.variance, VARIANCE_FLOOR))

    @classmethod
    def standard(cls, dim: int) -> "GaussianFactor":
        return cls(np.zeros(dim), np.ones(dim))


def poe_fuse(experts: Sequence[GaussianFactor], prior_expert: bool = False) -> GaussianFactor:
    """
    Producto de expertos gaussianos.

    Args:
        experts (list): lista no vacía de GaussianFactor de la misma dimensión.
        prior_expert (bool): agrega un experto N(0, I) al producto.

    Returns:
        GaussianFactor: la gaussiana conjunta.

    Raises:
        ValueError: "no experts" si la lista está vacía, o dimensiones distintas.
    """
    experts = list(experts)
    if not experts:
        raise ValueError("no experts: poe_fuse requiere al menos un experto.")
    dim = experts[0].dim
    if any(e.dim != dim for e in experts):
        raise ValueError("Todos los expertos deben tener la misma dimensión.")
    if prior_expert:
        experts.append(GaussianFactor.standard(dim))
    if len(experts) == 1:
        return experts[0]

    precision = 1.0 / np.stack([np.maximum(e.variance, VARIANCE_FLOOR) for e in experts])
    weighted = np.stack([e.mean for e in experts]) * precision
    # orden canónico por componente: la suma no depende del orden de entrada
    order = np.lexsort((weighted, precision), axis=0)
    precision_sorted = np.take_along_axis(precision, order, axis=0)
    weighted_sorted = np.take_along_axis(weighted, order, axis=0)
    total_precision = np.zeros(dim)
    total_weighted = np.zeros(dim)
    for row in range(precision_sorted.shape[0]):
        total_precision = total_precision + precision_sorted[row]
        total_weighted = total_weighted + weighted_sorted[row]
    variance = 1.0 / total_precision
    return GaussianFactor(variance * total_weighted, variance)


def drop_modalities(experts: Sequence[GaussianFactor], keep_mask: Optional[Sequence[bool]] = None,
                    drop_prob: Optional[float] = None, seed: int = 0) -> List[GaussianFactor]:
    """
    Quita modalidades de la entrada (modality dropout).

    Con keep_mask se conservan las posiciones marcadas; con drop_prob cada experto
    se descarta con esa probabilidad usando el generador sembrado.

    Raises:
        ValueError: "all modalities dropped" si no queda ningún experto.
    """
    experts = list(experts)
    if keep_mask is not None:
        keep = np.asarray(keep_mask, dtype=bool)
        if keep.shape != (len(experts),):
            raise ValueError("keep_mask debe tener un valor por experto.")
    elif drop_prob is not None:
        if not 0 <= drop_prob <= 1:
            raise ValueError("drop_prob debe estar en [0, 1].")
        keep = make_generator(seed).random(len(experts)) >= drop_prob
    else:
        keep = np.ones(len(experts), dtype=bool)
    kept = [e for e, k in zip(experts, keep) if k]
    if not kept:
        raise ValueError("all modalities dropped: debe conservarse al menos un experto.")
    logger.debug("drop_modalities: conservados %d de %d", len(kept), len(experts))
    return kept


def gaussian_kl_standard(g: GaussianFactor) -> float:
    """KL(N(μ, σ²) ‖ N(0, I)) = Σ ½(σ² + μ² − 1 − ln σ²)."""
    variance = g.variance
    terms = 0.5 * (variance + g.mean ** 2 - 1.0 - np.log(variance))
    return float(max(np.sum(terms), 0.0))


def sample_gaussian(g: GaussianFactor, seed: int, n: Optional[int] = None) -> np.ndarray:
    """
    z = μ + σ·ε con ε de Box–Muller sobre el generador sembrado.

    Args:
        g (GaussianFactor): distribución.
        seed (int): semilla.
        n (int, optional): número de muestras; si se omite regresa un solo vector.

    Returns:
        np.ndarray: (dim,) o (n, dim).
    """
    shape = (g.dim,) if n is None else (int(n), g.dim)
    eps = standard_normal(make_generator(seed), shape)
    return g.mean + g.std * eps
