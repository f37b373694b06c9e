# app/rng.py
"""
Generación de números aleatorios reproducible

Todas las fuentes aleatorias del paquete pasan por aquí:
  - Uniformes de un generador basado en contador (Philox de numpy), con la
    semilla y un identificador de flujo combinados por SeedSequence.
  - Normales estándar por la transformada de Box–Muller sobre esas uniformes.

El mismo (seed, stream) produce siempre la misma secuencia, en cualquier máquina
con la misma versión de numpy.
"""

from __future__ import annotations

import numpy as np


def make_generator(seed: int, *stream: int) -> np.random.Generator:
    """
    Crea un generador Philox determinista para la semilla y el flujo indicados.

    Args:
        seed (int): semilla no negativa.
        *stream (int): identificadores adicionales (época, paso, cadena...).

    Returns:
        np.random.Generator
    """
    if int(seed) < 0:
        raise ValueError(f"La semilla debe ser no negativa (recibida {seed}).")
    entropy = [int(seed)] + [int(s) for s in stream]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))


def box_muller(u1: np.ndarray, u2: np.ndarray) -> np.ndarray:
    # u1 en (0, 1] para que log(u1) sea finito
    radius = np.sqrt(-2.0 * np.log(u1))
    angle = 2.0 * np.pi * u2
    return np.concatenate([radius * np.cos(angle), radius * np.sin(angle)])


def standard_normal(generator: np.random.Generator, size) -> np.ndarray:
    """
    Muestras N(0, 1) con forma `size`, dos normales por cada par de uniformes.
    """
    shape = (size,) if np.isscalar(size) else tuple(size)
    n = int(np.prod(shape)) if shape else 1
    pairs = (n + 1) // 2
    u = generator.random(2 * pairs)
    z = box_muller(1.0 - u[:pairs], u[pairs:])
    return z[:n].reshape(shape)
