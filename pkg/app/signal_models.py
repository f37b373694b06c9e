# app/signal_models.py
"""
Modelos de señal de RM en forma cerrada

Contiene las ecuaciones de señal para MPRAGE, spin echo y FLAIR, sus derivadas
analíticas respecto a (PD, T1, T2) y la síntesis voxel a voxel de contrastes a
partir de un PropertyMap.

    MPRAGE: s = G·PD·(1 − 2e^{−TI/T1} / (1 + e^{−TR/T1}))
    SE:     s = G·PD·(1 − e^{−TR/T1})·e^{−TE/T2}
    FLAIR:  s = G·PD·(1 − 2e^{−TI/T1} + e^{−TR/T1})·e^{−TE/T2}

La ganancia G se fija en 1: cualquier escala del escáner queda absorbida en PD.
Todas las funciones aceptan escalares o arreglos de numpy (broadcasting).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from app.core import AcquisitionParams, PropertyMap, SequenceKind, Volume
from app.rng import make_generator, standard_normal

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SignalOptions:
    gain: float = 1.0
    magnitude_mode: bool = False

    def __post_init__(self):
        if self.gain != 1.0:
            raise ValueError("La ganancia G está fijada en 1.0; el escalamiento se absorbe en PD.")

    @classmethod
    def from_mapping(cls, section: Optional[dict]) -> "SignalOptions":
        section = dict(section or {})
        unknown = set(section) - {"gain", "magnitude_mode"}
        if unknown:
            raise ValueError(f"Claves desconocidas en [signal]: {sorted(unknown)}")
        return cls(**section)


DEFAULT_OPTIONS = SignalOptions()


def _check_sequence(params: AcquisitionParams, expected: SequenceKind):
    if params.sequence is not expected:
        raise ValueError(f"Se esperaba una secuencia {expected.value}, recibida {params.sequence.value}.")


def _positive(name: str, value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if np.any(~np.isfinite(arr)) or np.any(arr <= 0):
        raise ValueError(f"{name} debe ser estrictamente positivo.")
    return arr


def _finish(signal, opts: SignalOptions):
    signal = opts.gain * signal
    return np.abs(signal) if opts.magnitude_mode else signal


# -----------------------------------------------------------------------------
# Términos de relajación (factores sin PD)
# -----------------------------------------------------------------------------
def _mprage_term(t1, params: AcquisitionParams):
    a = np.exp(-params.ti / t1)
    c = np.exp(-params.tr / t1)
    term = 1.0 - 2.0 * a / (1.0 + c)
    # d/dT1 de a/(1+c), con a' = a·TI/T1² y c' = c·TR/T1²
    da = a * params.ti / t1 ** 2
    dc = c * params.tr / t1 ** 2
    dterm_t1 = -2.0 * (da * (1.0 + c) - a * dc) / (1.0 + c) ** 2
    return term, dterm_t1


def _se_terms(t1, t2, params: AcquisitionParams):
    c = np.exp(-params.tr / t1)
    e = np.exp(-params.te / t2)
    recovery = 1.0 - c
    return recovery, e, -c * params.tr / t1 ** 2, e * params.te / t2 ** 2


def _flair_terms(t1, t2, params: AcquisitionParams):
    a = np.exp(-params.ti / t1)
    c = np.exp(-params.tr / t1)
    e = np.exp(-params.te / t2)
    inversion = 1.0 - 2.0 * a + c
    dinv_t1 = -2.0 * a * params.ti / t1 ** 2 + c * params.tr / t1 ** 2
    return inversion, e, dinv_t1, e * params.te / t2 ** 2


# =============================================================================
# Ecuaciones de señal
# =============================================================================
def signal_mprage(pd, t1, params: AcquisitionParams, opts: SignalOptions = DEFAULT_OPTIONS):
    """
    Señal MPRAGE. No depende de T2.

    Raises:
        ValueError: secuencia distinta de MPRAGE o T1 ≤ 0.
    """
    _check_sequence(params, SequenceKind.MPRAGE)
    t1 = _positive("T1", t1)
    term, _ = _mprage_term(t1, params)
    return _finish(np.asarray(pd, dtype=np.float64) * term, opts)


def signal_se(pd, t1, t2, params: AcquisitionParams, opts: SignalOptions = DEFAULT_OPTIONS):
    """Señal spin echo; siempre ≥ 0 para PD ≥ 0."""
    _check_sequence(params, SequenceKind.SPIN_ECHO)
    t1, t2 = _positive("T1", t1), _positive("T2", t2)
    recovery, decay, _, _ = _se_terms(t1, t2, params)
    return _finish(np.asarray(pd, dtype=np.float64) * recovery * decay, opts)


def signal_flair(pd, t1, t2, params: AcquisitionParams, opts: SignalOptions = DEFAULT_OPTIONS):
    """Señal FLAIR; se anula para TI = T1·ln 2 cuando TR ≫ T1."""
    _check_sequence(params, SequenceKind.FLAIR)
    t1, t2 = _positive("T1", t1), _positive("T2", t2)
    inversion, decay, _, _ = _flair_terms(t1, t2, params)
    return _finish(np.asarray(pd, dtype=np.float64) * inversion * decay, opts)


def signal_value(pd, t1, t2, params: AcquisitionParams, opts: SignalOptions = DEFAULT_OPTIONS):
    """Despacha al modelo que corresponde a `params.sequence`."""
    if params.sequence is SequenceKind.MPRAGE:
        return signal_mprage(pd, t1, params, opts)
    if params.sequence is SequenceKind.SPIN_ECHO:
        return signal_se(pd, t1, t2, params, opts)
    if params.sequence is SequenceKind.FLAIR:
        return signal_flair(pd, t1, t2, params, opts)
    raise ValueError(f"Secuencia sin modelo de señal: {params.sequence}")


def signal_jacobian(pd, t1, t2, params: AcquisitionParams,
                    opts: SignalOptions = DEFAULT_OPTIONS) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Derivadas parciales analíticas (∂s/∂PD, ∂s/∂T1, ∂s/∂T2).

    Para MPRAGE ∂s/∂T2 es cero exactamente. En modo magnitud las derivadas se
    multiplican por el signo de la señal.

    Returns:
        tuple: tres arreglos con la forma común de las entradas.
    """
    pd = np.asarray(pd, dtype=np.float64)
    t1, t2 = _positive("T1", t1), _positive("T2", t2)
    shape = np.broadcast_shapes(pd.shape, t1.shape, t2.shape)
    if params.sequence is SequenceKind.MPRAGE:
        term, dterm = _mprage_term(t1, params)
        d_pd = term
        d_t1 = pd * dterm
        d_t2 = np.zeros(shape)
        signal = pd * term
    elif params.sequence is SequenceKind.SPIN_ECHO:
        recovery, decay, drec_t1, ddec_t2 = _se_terms(t1, t2, params)
        d_pd = recovery * decay
        d_t1 = pd * drec_t1 * decay
        d_t2 = pd * recovery * ddec_t2
        signal = pd * d_pd
    elif params.sequence is SequenceKind.FLAIR:
        inversion, decay, dinv_t1, ddec_t2 = _flair_terms(t1, t2, params)
        d_pd = inversion * decay
        d_t1 = pd * dinv_t1 * decay
        d_t2 = pd * inversion * ddec_t2
        signal = pd * d_pd
    else:
        raise ValueError(f"Secuencia sin modelo de señal: {params.sequence}")
    partials = [np.broadcast_to(p, shape).astype(np.float64) * opts.gain for p in (d_pd, d_t1, d_t2)]
    if opts.magnitude_mode:
        sign = np.sign(np.broadcast_to(signal, shape))
        partials = [p * sign for p in partials]
    return tuple(partials)


# =============================================================================
# Síntesis voxel a voxel
# =============================================================================
def synthesize(props: PropertyMap, params: AcquisitionParams, opts: SignalOptions = DEFAULT_OPTIONS,
               noise_sigma: Optional[float] = None, seed: int = 0) -> Volume:
    """
    Sintetiza un contraste aplicando el modelo de señal a cada voxel.

    Args:
        props (PropertyMap): mapas PD, T1, T2.
        params (AcquisitionParams): secuencia y tiempos.
        opts (SignalOptions): ganancia y modo magnitud.
        noise_sigma (float, optional): desviación estándar del ruido gaussiano aditivo.
        seed (int): semilla del generador de ruido.

    Returns:
        Volume: volumen de un canal con la señal.
    """
    if noise_sigma is not None and (not np.isfinite(noise_sigma) or noise_sigma < 0):
        raise ValueError(f"noise_sigma debe ser ≥ 0 (recibido {noise_sigma}).")
    signal = signal_value(props.pd, props.t1, props.t2, params, opts)
    if noise_sigma:
        signal = signal + noise_sigma * standard_normal(make_generator(seed), signal.shape)
    logger.debug("Síntesis %s: TE=%s TR=%s TI=%s sigma=%s", params.sequence.value,
                 params.te, params.tr, params.ti, noise_sigma)
    return Volume(props.dims, (params.sequence.value,), signal[None])
