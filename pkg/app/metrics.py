# app/metrics.py
"""
Métricas de calidad de reconstrucción y reporte de validación de distribuciones

Contiene:
  - mse, mae, psnr sobre pares de volúmenes.
  - ssim_map / ms_ssim: similitud estructural multiescala por corte 2-D con
    ventana gaussiana 11×11 (σ = 1.5), convolución de región válida y
    submuestreo por promedio 2×2.
  - validate_properties: medianas de T1/T2 por región contra medianas de
    referencia, con histogramas recortados al percentil 95.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.signal import convolve2d

from app.core import PropertyMap, Volume
from app.phantom import property_histogram

logger = logging.getLogger(__name__)

MS_SSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
REPORT_COLUMNS = ["label", "channel", "median_fit", "median_ref", "abs_diff"]
SUMMARY_LABEL = "ALL"


def _pair(a: Volume, b: Volume) -> Tuple[np.ndarray, np.ndarray]:
    if a.dims != b.dims or a.channels != b.channels:
        raise ValueError(f"Volúmenes incompatibles: {a.dims}×{a.channels} vs {b.dims}×{b.channels}")
    return a.data, b.data


# =============================================================================
# Errores punto a punto
# =============================================================================
def mse(a: Volume, b: Volume) -> float:
    x, y = _pair(a, b)
    diff = x - y
    return float(np.mean(diff * diff))


def mae(a: Volume, b: Volume) -> float:
    x, y = _pair(a, b)
    return float(np.mean(np.abs(x - y)))


def psnr(a: Volume, b: Volume, peak: Optional[float] = None) -> float:
    """
    Relación señal a ruido pico: 10·log10(peak²/mse).

    Args:
        a (Volume): referencia.
        b (Volume): volumen evaluado.
        peak (float, optional): por defecto max(a) − min(a).

    Returns:
        float: decibeles; math.inf si a = b, aun con a constante.

    Raises:
        ValueError: peak explícito ≤ 0, o a constante y distinta de b sin peak.
    """
    error = mse(a, b)
    if peak is not None and peak <= 0:
        raise ValueError(f"El pico debe ser positivo (recibido {peak}).")
    if error == 0:
        return math.inf
    if peak is None:
        peak = float(np.max(a.data) - np.min(a.data))
        if peak <= 0:
            raise ValueError("La referencia es constante; indique peak explícitamente.")
    return float(10.0 * np.log10(peak * peak / error))


# =============================================================================
# MS-SSIM
# =============================================================================
@dataclass(frozen=True)
class MsSsimConfig:
    scales: int = 5
    window_size: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: Optional[float] = None
    weights: Tuple[float, ...] = MS_SSIM_WEIGHTS

    def __post_init__(self):
        object.__setattr__(self, "weights", tuple(float(w) for w in self.weights))
        if self.scales < 1 or self.scales > len(self.weights):
            raise ValueError(f"scales debe estar en 1..{len(self.weights)}.")
        if self.window_size < 1 or self.window_size % 2 == 0:
            raise ValueError("window_size debe ser impar y positivo.")
        if self.data_range is not None and self.data_range <= 0:
            raise ValueError("data_range debe ser positivo.")

    @property
    def min_size(self) -> int:
        return self.window_size * 2 ** (self.scales - 1)

    def scale_weights(self) -> np.ndarray:
        """Pesos de las escalas usadas, renormalizados si se truncan."""
        w = np.asarray(self.weights[:self.scales])
        if self.scales == len(self.weights):
            return w
        return w / w.sum()

    @classmethod
    def from_mapping(cls, section: Optional[dict], **overrides) -> "MsSsimConfig":
        values = dict(section or {})
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"Claves desconocidas en [metrics]: {sorted(unknown)}")
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    coords = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(coords ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def max_scales(shape: Sequence[int], window_size: int = 11, limit: int = len(MS_SSIM_WEIGHTS)) -> int:
    """Mayor número de escalas con min(shape) ≥ window·2^(escalas−1); 0 si ni una cabe."""
    smallest = min(int(s) for s in shape)
    scales = 0
    while scales < limit and smallest >= window_size * 2 ** scales:
        scales += 1
    return scales


def _as_slices(image) -> np.ndarray:
    """Cortes 2-D (nz, ny, nx) de un Volume de un canal o de un arreglo 2-D/3-D."""
    if isinstance(image, Volume):
        if image.channels != 1:
            raise ValueError("MS-SSIM requiere volúmenes de un solo canal.")
        return image.data[0]
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 2:
        return arr[None]
    if arr.ndim != 3:
        raise ValueError(f"Se esperaba una imagen 2-D o una pila de cortes, forma {arr.shape}.")
    return arr


def _shared_range(x: np.ndarray, y: np.ndarray, config: MsSsimConfig) -> float:
    if config.data_range is not None:
        return float(config.data_range)
    span = float(max(x.max(), y.max()) - min(x.min(), y.min()))
    return span if span > 0 else 1.0


def _ssim_terms(x: np.ndarray, y: np.ndarray, window: np.ndarray, c1: float, c2: float):
    mu_x = convolve2d(x, window, mode="valid")
    mu_y = convolve2d(y, window, mode="valid")
    sigma_x = convolve2d(x * x, window, mode="valid") - mu_x * mu_x
    sigma_y = convolve2d(y * y, window, mode="valid") - mu_y * mu_y
    sigma_xy = convolve2d(x * y, window, mode="valid") - mu_x * mu_y
    luminance = (2.0 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    cs = (2.0 * sigma_xy + c2) / (sigma_x + sigma_y + c2)
    return luminance, cs


def ssim_map(a, b, config: MsSsimConfig = MsSsimConfig()) -> np.ndarray:
    """Mapa SSIM de una sola escala (región válida) para un par de imágenes 2-D."""
    x = np.asarray(a, dtype=np.float64)
    y = np.asarray(b, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 2:
        raise ValueError("ssim_map requiere dos imágenes 2-D de la misma forma.")
    if min(x.shape) < config.window_size:
        raise ValueError(f"Imagen demasiado pequeña para la ventana: tamaño mínimo {config.window_size}.")
    L = _shared_range(x, y, config)
    luminance, cs = _ssim_terms(x, y, gaussian_window(config.window_size, config.sigma),
                                (config.k1 * L) ** 2, (config.k2 * L) ** 2)
    return luminance * cs


def _downsample(x: np.ndarray) -> np.ndarray:
    ny, nx = (x.shape[0] // 2) * 2, (x.shape[1] // 2) * 2
    x = x[:ny, :nx]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _ms_ssim_slice(x: np.ndarray, y: np.ndarray, config: MsSsimConfig, window: np.ndarray) -> float:
    L = _shared_range(x, y, config)
    c1, c2 = (config.k1 * L) ** 2, (config.k2 * L) ** 2
    weights = config.scale_weights()
    score = 1.0
    for level in range(config.scales):
        luminance, cs = _ssim_terms(x, y, window, c1, c2)
        if level == config.scales - 1:
            value = max(float(np.mean(luminance * cs)), 0.0)
        else:
            value = max(float(np.mean(cs)), 0.0)
            x, y = _downsample(x), _downsample(y)
        score *= value ** weights[level]
    return score


def ms_ssim(a, b, config: MsSsimConfig = MsSsimConfig()) -> float:
    """
    MS-SSIM promedio sobre los cortes axiales.

    Los términos de contraste-estructura negativos se recortan a 0, así que el
    resultado queda en [0, 1].

    Args:
        a, b (Volume | np.ndarray): imágenes de un canal con la misma forma.
        config (MsSsimConfig): escalas, ventana y constantes de estabilidad.

    Raises:
        ValueError: formas distintas o imagen menor que window·2^(escalas−1).
    """
    x_slices, y_slices = _as_slices(a), _as_slices(b)
    if x_slices.shape != y_slices.shape:
        raise ValueError(f"Formas distintas: {x_slices.shape} vs {y_slices.shape}")
    if min(x_slices.shape[1:]) < config.min_size:
        raise ValueError(f"Imagen demasiado pequeña para {config.scales} escalas: "
                         f"tamaño mínimo {config.min_size}, recibido {x_slices.shape[2]}×{x_slices.shape[1]}.")
    window = gaussian_window(config.window_size, config.sigma)
    scores = [_ms_ssim_slice(x, y, config, window) for x, y in zip(x_slices, y_slices)]
    return float(np.mean(scores))


# =============================================================================
# Validación de distribuciones
# =============================================================================
@dataclass(frozen=True)
class ReferenceMedian:
    label: str
    median_t1: float
    median_t2: float

    def __post_init__(self):
        if self.median_t1 <= 0 or self.median_t2 <= 0:
            raise ValueError(f"Medianas de referencia no positivas para {self.label}.")

    @classmethod
    def coerce(cls, entry) -> "ReferenceMedian":
        if isinstance(entry, cls):
            return entry
        if isinstance(entry, dict):
            return cls(str(entry["label"]), float(entry["t1"]), float(entry["t2"]))
        label, t1, t2 = entry
        return cls(str(label), float(t1), float(t2))


@dataclass(frozen=True)
class ValidationConfig:
    mask_pd_min: float = 0.0
    clip_percentile: float = 0.95
    bins: int = 50

    def __post_init__(self):
        if not 0 < self.clip_percentile <= 1:
            raise ValueError("clip_percentile debe estar en (0, 1].")
        if self.bins < 1:
            raise ValueError("bins debe ser ≥ 1.")

    @classmethod
    def from_mapping(cls, section: Optional[dict]) -> "ValidationConfig":
        values = dict(section or {})
        unknown = set(values) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"Claves desconocidas en [metrics.validation]: {sorted(unknown)}")
        return cls(**values)


@dataclass
class ValidationReport:
    summary: pd.DataFrame
    histograms: Dict[str, pd.DataFrame] = field(default_factory=dict)

    def write(self, out_csv: Union[str, Path]) -> List[Path]:
        """Escribe el resumen y un CSV de histograma por canal (<nombre>_hist_<canal>.csv)."""
        out_csv = Path(out_csv)
        self.summary.to_csv(out_csv, index=False)
        written = [out_csv]
        for channel, hist in self.histograms.items():
            path = out_csv.with_name(f"{out_csv.stem}_hist_{channel}.csv")
            hist.to_csv(path, index=False)
            written.append(path)
        return written


def validate_properties(props: PropertyMap, reference: Sequence, config: ValidationConfig = ValidationConfig(),
                        regions: Optional[Dict[str, np.ndarray]] = None) -> ValidationReport:
    """
    Compara las medianas ajustadas de T1 y T2 contra medianas de referencia.

    Cada entrada de referencia produce una fila por canal (T1, T2); si `regions`
    tiene una máscara con su etiqueta, la mediana se toma en esa región, si no
    sobre todos los voxeles con PD > mask_pd_min. Al final se agregan dos filas
    resumen (etiqueta ALL) con las medianas globales.

    Args:
        props (PropertyMap): mapas ajustados.
        reference (list): entradas (label, median_t1, median_t2), dicts o ReferenceMedian.
        config (ValidationConfig): umbral de PD, percentil de recorte y bins.
        regions (dict, optional): etiqueta → máscara booleana (nz, ny, nx).

    Returns:
        ValidationReport: resumen con columnas label,channel,median_fit,median_ref,abs_diff e histogramas.
    """
    entries = [ReferenceMedian.coerce(e) for e in reference]
    if not entries:
        raise ValueError("La lista de referencia está vacía.")
    foreground = props.pd > config.mask_pd_min
    if not np.any(foreground):
        raise ValueError("Ningún voxel supera el umbral de PD.")

    rows = []
    for entry in entries:
        mask = foreground
        if regions and entry.label in regions:
            mask = foreground & np.asarray(regions[entry.label], dtype=bool)
            if not np.any(mask):
                raise ValueError(f"La región {entry.label} no tiene voxeles sobre el umbral de PD.")
        else:
            logger.warning("Sin máscara para %s; se usa la mediana global.", entry.label)
        for channel, ref in (("T1", entry.median_t1), ("T2", entry.median_t2)):
            fitted = float(np.median(props.channel(channel)[mask]))
            rows.append({"label": entry.label, "channel": channel, "median_fit": fitted,
                         "median_ref": ref, "abs_diff": abs(fitted - ref)})

    histograms = {}
    for channel in ("T1", "T2"):
        rows.append({"label": SUMMARY_LABEL, "channel": channel,
                     "median_fit": float(np.median(props.channel(channel)[foreground])),
                     "median_ref": np.nan, "abs_diff": np.nan})
        histograms[channel] = property_histogram(props, channel, bins=config.bins, mask_pd_min=-np.inf,
                                                 clip_percentile=config.clip_percentile, mask=foreground)
    return ValidationReport(pd.DataFrame(rows, columns=REPORT_COLUMNS), histograms)
