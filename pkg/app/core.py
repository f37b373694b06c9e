# app/core.py
"""
Módulo de tipos del dominio

Contiene:
  1. SequenceKind y AcquisitionParams: la secuencia y los tiempos TE/TR/TI (en segundos).
  2. Volume: contenedor multicanal inmutable (orden planar por canal, x más rápido).
  3. PropertyMap: Volume de tres canales (PD, T1, T2), la representación compartida entre modalidades.
  4. Preprocesamiento de intensidades: scale_to_unit y unscale.
"""

from __future__ import annotations

import enum
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence, Tuple

import numpy as np

logger = logging.getLogger(__name__)

PROPERTY_CHANNELS = ("PD", "T1", "T2")
DEFAULT_PERCENTILE = 0.995


# =============================================================================
# Secuencias y parámetros de adquisición
# =============================================================================
class SequenceKind(str, enum.Enum):
    MPRAGE = "mprage"
    SPIN_ECHO = "se"
    FLAIR = "flair"

    @property
    def uses_inversion(self) -> bool:
        return self in (SequenceKind.MPRAGE, SequenceKind.FLAIR)

    @classmethod
    def parse(cls, value) -> "SequenceKind":
        """
        Convierte un texto ('mprage', 'se', 'spin_echo', 'flair') en SequenceKind.

        Raises:
            ValueError: si la secuencia no es una de las tres soportadas.
        """
        if isinstance(value, SequenceKind):
            return value
        key = str(value).strip().lower()
        aliases = {"spin_echo": "se", "spin-echo": "se", "t1": "mprage"}
        key = aliases.get(key, key)
        for kind in cls:
            if kind.value == key:
                return kind
        raise ValueError(f"Secuencia no soportada: {value!r}. Use mprage, se o flair.")


@dataclass(frozen=True)
class AcquisitionParams:
    """
    Parámetros de adquisición de una secuencia; todos los tiempos en segundos.

    Invariantes: te > 0, tr > 0, te < tr; ti presente solo para MPRAGE y FLAIR con 0 < ti < tr.
    """
    sequence: SequenceKind
    te: float
    tr: float
    ti: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "sequence", SequenceKind.parse(self.sequence))
        for name in ("te", "tr"):
            value = float(getattr(self, name))
            if not np.isfinite(value) or value <= 0:
                raise ValueError(f"{name.upper()} debe ser positivo y finito (recibido {value}).")
            object.__setattr__(self, name, value)
        if self.te >= self.tr:
            raise ValueError(f"TE ({self.te}) debe ser menor que TR ({self.tr}).")
        if self.sequence.uses_inversion:
            if self.ti is None:
                raise ValueError(f"La secuencia {self.sequence.value} requiere TI.")
            ti = float(self.ti)
            if not np.isfinite(ti) or not 0 < ti < self.tr:
                raise ValueError(f"TI debe cumplir 0 < TI < TR (TI={ti}, TR={self.tr}).")
            object.__setattr__(self, "ti", ti)
        elif self.ti is not None:
            raise ValueError("Spin echo no usa inversión: TI no está permitido.")

    def as_vector(self) -> np.ndarray:
        """Vector de condicionamiento (TE, TR, TI), con TI = 0 cuando no aplica."""
        return np.array([self.te, self.tr, self.ti or 0.0], dtype=np.float64)

    def to_dict(self) -> dict:
        return {"seq": self.sequence.value, "te": self.te, "tr": self.tr, "ti": self.ti}

    @classmethod
    def from_dict(cls, data: dict) -> "AcquisitionParams":
        return cls(SequenceKind.parse(data["seq"]), data["te"], data["tr"], data.get("ti"))


# =============================================================================
# Volumen
# =============================================================================
@dataclass(frozen=True)
class Volume:
    """
    Volumen multicanal. `data` tiene forma (canales, nz, ny, nx), de modo que el
    aplanado en orden C coincide con el formato .pvol (planar por canal, x más rápido).
    """
    dims: Tuple[int, int, int]
    channel_names: Tuple[str, ...]
    data: np.ndarray = field(repr=False)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError(f"Dimensiones inválidas: {self.dims}")
        names = tuple(str(n) for n in self.channel_names)
        if not names:
            raise ValueError("El volumen necesita al menos un canal.")
        nx, ny, nz = dims
        data = np.asarray(self.data, dtype=np.float64)
        expected = nx * ny * nz * len(names)
        if data.size != expected:
            raise ValueError(f"Longitud de datos {data.size} no coincide con dims × canales = {expected}.")
        data = data.reshape(len(names), nz, ny, nx).copy()
        if not np.all(np.isfinite(data)):
            raise ValueError("El volumen contiene valores NaN o infinitos.")
        data.setflags(write=False)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "channel_names", names)
        object.__setattr__(self, "data", data)

    @classmethod
    def from_flat(cls, dims: Sequence[int], channel_names: Sequence[str], values) -> "Volume":
        return cls(tuple(dims), tuple(channel_names), np.asarray(values, dtype=np.float64))

    @classmethod
    def from_image(cls, image: np.ndarray, name: str = "signal") -> "Volume":
        """Crea un volumen de un canal a partir de un arreglo (ny, nx) o (nz, ny, nx)."""
        arr = np.asarray(image, dtype=np.float64)
        if arr.ndim == 2:
            arr = arr[None]
        if arr.ndim != 3:
            raise ValueError("Se esperaba una imagen 2D o 3D.")
        nz, ny, nx = arr.shape
        return cls((nx, ny, nz), (name,), arr)

    @property
    def channels(self) -> int:
        return len(self.channel_names)

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    def channel(self, name_or_index) -> np.ndarray:
        """Regresa el canal como arreglo (nz, ny, nx) de solo lectura."""
        if isinstance(name_or_index, str):
            if name_or_index not in self.channel_names:
                raise ValueError(f"Canal desconocido: {name_or_index}")
            index = self.channel_names.index(name_or_index)
        else:
            index = int(name_or_index)
        return self.data[index]

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    def with_data(self, data: np.ndarray, channel_names: Optional[Sequence[str]] = None) -> "Volume":
        names = tuple(channel_names) if channel_names is not None else self.channel_names
        return Volume(self.dims, names, data)

    def slice_region(self, xs: slice, ys: slice, zs: slice = slice(None)) -> "Volume":
        """Sub-volumen rectangular (mismos canales)."""
        sub = self.data[:, zs, ys, xs]
        c, nz, ny, nx = sub.shape
        return type(self)((nx, ny, nz), self.channel_names, sub)


@dataclass(frozen=True)
class PropertyMap(Volume):
    """
    Mapa de propiedades de tejido con canales (PD, T1, T2).

    PD es adimensional (absorbe la ganancia del escáner); T1 y T2 en segundos.
    """

    def __post_init__(self):
        super().__post_init__()
        if self.channel_names != PROPERTY_CHANNELS:
            raise ValueError(f"Un PropertyMap requiere los canales {PROPERTY_CHANNELS}, recibió {self.channel_names}.")
        if np.any(self.data[0] < 0):
            raise ValueError("PD debe ser no negativo.")
        if np.any(self.data[1] <= 0) or np.any(self.data[2] <= 0):
            raise ValueError("T1 y T2 deben ser estrictamente positivos.")

    @classmethod
    def from_arrays(cls, pd, t1, t2) -> "PropertyMap":
        pd = np.asarray(pd, dtype=np.float64)
        if pd.ndim == 2:
            pd, t1, t2 = pd[None], np.asarray(t1)[None], np.asarray(t2)[None]
        stacked = np.stack([pd, np.broadcast_to(t1, pd.shape), np.broadcast_to(t2, pd.shape)])
        _, nz, ny, nx = stacked.shape
        return cls((nx, ny, nz), PROPERTY_CHANNELS, stacked)

    @classmethod
    def from_volume(cls, volume: Volume) -> "PropertyMap":
        return cls(volume.dims, volume.channel_names, volume.data)

    @property
    def pd(self) -> np.ndarray:
        return self.data[0]

    @property
    def t1(self) -> np.ndarray:
        return self.data[1]

    @property
    def t2(self) -> np.ndarray:
        return self.data[2]


# =============================================================================
# Escalamiento de intensidades
# =============================================================================
@dataclass(frozen=True)
class ScaleRecord:
    """Registro del escalamiento: percentil usado y su valor p (estadística por volumen)."""
    percentile: float
    p: float
    scope: str = "volume"

    def to_dict(self) -> dict:
        return {"percentile": self.percentile, "p": self.p, "scope": self.scope}

    @classmethod
    def from_dict(cls, data: dict) -> "ScaleRecord":
        return cls(float(data["percentile"]), float(data["p"]), str(data.get("scope", "volume")))


def scale_to_unit(image: Volume, percentile: float = DEFAULT_PERCENTILE) -> Tuple[Volume, ScaleRecord]:
    """
    Escala las intensidades a [-1, 1] usando el percentil indicado como tope.

    v' = 2·clamp(v, 0, p)/p − 1, con p el cuantil (interpolación lineal) del volumen completo.

    Args:
        image (Volume): volumen de un solo canal.
        percentile (float): fracción en (0, 1].

    Returns:
        tuple: (volumen escalado, ScaleRecord).
    """
    if image.channels != 1:
        raise ValueError("scale_to_unit requiere un volumen de un solo canal.")
    if not 0 < percentile <= 1:
        raise ValueError(f"El percentil debe estar en (0, 1], recibido {percentile}.")
    values = image.flat()
    p = float(np.quantile(values, percentile, method="linear"))
    if p <= 0:
        raise ValueError("degenerate intensity range: el percentil de intensidades es 0.")
    scaled = 2.0 * np.clip(values, 0.0, p) / p - 1.0
    logger.debug("scale_to_unit: percentil=%s p=%.6g", percentile, p)
    return image.with_data(scaled), ScaleRecord(float(percentile), p)


def unscale(image: Volume, record: ScaleRecord) -> Volume:
    """
    Inversa de la parte afín de scale_to_unit: v = (v' + 1)·p/2.
    """
    if not isinstance(record, ScaleRecord):
        raise ValueError("Se requiere un ScaleRecord válido para invertir el escalamiento.")
    if not np.isfinite(record.p) or record.p <= 0:
        raise ValueError(f"ScaleRecord inválido: p={record.p}")
    values = image.flat()
    if np.any(values < -1.0) or np.any(values > 1.0):
        raise ValueError("unscale espera valores en [-1, 1].")
    return image.with_data((values + 1.0) * record.p / 2.0)
