# app/phantom.py
"""
Fantomas sintéticos e histogramas de propiedades

Contiene:
  - PhantomShape / PhantomSpec: elipses y rectángulos en coordenadas normalizadas
    [-1, 1] (centro del voxel), cada uno con sus valores (PD, T1, T2).
  - make_phantom: rasterización determinista; las figuras posteriores sobrescriben
    a las anteriores.
  - El preset "brain2d": fondo (PD = 0), región tipo materia gris, región tipo
    materia blanca y ventrículos tipo líquido. Los valores vienen de
    config/config.toml y son presets, no valores de referencia.
  - property_histogram: histograma de un canal sobre los voxeles con PD ≥ umbral.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from app.core import PROPERTY_CHANNELS, PropertyMap

logger = logging.getLogger(__name__)

# Valores por defecto del preset brain2d; config.toml [phantom.brain2d] los sobrescribe.
BRAIN2D_TISSUES = {
    "GM": {"pd": 0.80, "t1": 1.331, "t2": 0.110},
    "WM": {"pd": 0.69, "t1": 0.832, "t2": 0.080},
    "CSF": {"pd": 1.00, "t1": 4.000, "t2": 2.000},
}
BACKGROUND = {"pd": 0.0, "t1": 1.0, "t2": 0.1}
SHAPE_KINDS = ("ellipse", "rectangle")


@dataclass(frozen=True)
class PhantomShape:
    kind: str
    center: Tuple[float, float]
    extent: Tuple[float, float]
    pd: float
    t1: float
    t2: float
    label: str = ""
    angle_deg: float = 0.0

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"Tipo de figura desconocido: {self.kind!r}")
        if len(self.center) != 2 or len(self.extent) != 2:
            raise ValueError("center y extent/radii deben tener dos componentes.")
        if any(e <= 0 for e in self.extent):
            raise ValueError("Los radios/extensiones deben ser positivos.")
        if self.pd < 0 or self.t1 <= 0 or self.t2 <= 0:
            raise ValueError("Cada figura requiere PD ≥ 0, T1 > 0 y T2 > 0.")
        object.__setattr__(self, "center", tuple(float(c) for c in self.center))
        object.__setattr__(self, "extent", tuple(float(e) for e in self.extent))

    def contains(self, x, y) -> np.ndarray:
        """Prueba punto-en-figura en coordenadas normalizadas."""
        dx = np.asarray(x, dtype=np.float64) - self.center[0]
        dy = np.asarray(y, dtype=np.float64) - self.center[1]
        angle = np.deg2rad(self.angle_deg)
        xr = np.cos(angle) * dx + np.sin(angle) * dy
        yr = -np.sin(angle) * dx + np.cos(angle) * dy
        a, b = self.extent
        if self.kind == "ellipse":
            return (xr / a) ** 2 + (yr / b) ** 2 <= 1.0
        return (np.abs(xr) <= a) & (np.abs(yr) <= b)

    @classmethod
    def from_dict(cls, data: dict) -> "PhantomShape":
        extent = data.get("radii", data.get("extent"))
        if extent is None:
            raise ValueError("Cada figura necesita 'radii' o 'extent'.")
        return cls(kind=data["kind"], center=tuple(data["center"]), extent=tuple(extent),
                   pd=float(data["pd"]), t1=float(data["t1"]), t2=float(data["t2"]),
                   label=str(data.get("label", "")), angle_deg=float(data.get("angle_deg", 0.0)))


@dataclass(frozen=True)
class PhantomSpec:
    dims: Tuple[int, int, int]
    shapes: Tuple[PhantomShape, ...] = field(default_factory=tuple)
    background: dict = field(default_factory=lambda: dict(BACKGROUND))

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) == 2:
            dims = dims + (1,)
        if len(dims) != 3 or any(d <= 0 for d in dims):
            raise ValueError(f"Dimensiones del fantoma inválidas: {self.dims}")
        if not self.shapes:
            raise ValueError("La especificación del fantoma está vacía.")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "shapes", tuple(self.shapes))

    @classmethod
    def from_json(cls, path, dims: Sequence[int]) -> "PhantomSpec":
        """Lee una lista JSON de figuras {kind, center, radii/extent, pd, t1, t2}."""
        with open(path, "r", encoding="utf-8") as f:
            data = json.load(f)
        if isinstance(data, dict):
            dims = data.get("dims", dims)
            data = data.get("shapes", [])
        if not isinstance(data, list):
            raise ValueError("El archivo del fantoma debe contener una lista de figuras.")
        return cls(tuple(dims), tuple(PhantomShape.from_dict(item) for item in data))

    @classmethod
    def preset(cls, name: str, dims: Sequence[int], tissues: Optional[dict] = None) -> "PhantomSpec":
        if name != "brain2d":
            raise ValueError(f"Preset desconocido: {name!r}")
        return brain2d_spec(dims, tissues)


def brain2d_spec(dims: Sequence[int], tissues: Optional[dict] = None) -> PhantomSpec:
    """
    Corte axial esquemático: cerebro (GM), núcleo de sustancia blanca (WM) y dos ventrículos (CSF).
    """
    values = {name: dict(props) for name, props in BRAIN2D_TISSUES.items()}
    for name, props in (tissues or {}).items():
        if name not in values:
            raise ValueError(f"Tejido desconocido en el preset brain2d: {name}")
        values[name].update({k: float(v) for k, v in props.items()})
    gm, wm, csf = values["GM"], values["WM"], values["CSF"]
    shapes = (
        PhantomShape("ellipse", (0.0, 0.0), (0.85, 0.90), label="GM", **gm),
        PhantomShape("ellipse", (0.0, 0.0), (0.62, 0.70), label="WM", **wm),
        PhantomShape("ellipse", (-0.18, 0.05), (0.10, 0.30), angle_deg=-15.0, label="CSF", **csf),
        PhantomShape("ellipse", (0.18, 0.05), (0.10, 0.30), angle_deg=15.0, label="CSF", **csf),
    )
    return PhantomSpec(tuple(dims), shapes)


def voxel_centers(dims: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    """Coordenadas normalizadas (x, y) de los centros de voxel, forma (ny, nx)."""
    nx, ny = int(dims[0]), int(dims[1])
    xs = 2.0 * (np.arange(nx) + 0.5) / nx - 1.0
    ys = 2.0 * (np.arange(ny) + 0.5) / ny - 1.0
    return np.meshgrid(xs, ys, indexing="xy")


def phantom_labels(spec: PhantomSpec) -> Tuple[np.ndarray, List[str]]:
    """
    Índice de la figura superior que cubre cada voxel (−1 para fondo).

    Returns:
        tuple: (arreglo (nz, ny, nx) de enteros, etiquetas de las figuras)
    """
    nx, ny, nz = spec.dims
    x, y = voxel_centers(spec.dims)
    index = np.full((ny, nx), -1, dtype=np.int64)
    for i, shape in enumerate(spec.shapes):
        index[shape.contains(x, y)] = i
    labels = [shape.label or f"shape{i}" for i, shape in enumerate(spec.shapes)]
    return np.broadcast_to(index, (nz, ny, nx)).copy(), labels


def region_masks(spec: PhantomSpec) -> dict:
    """Máscara booleana por etiqueta (figuras con la misma etiqueta se unen)."""
    index, labels = phantom_labels(spec)
    masks = {}
    for i, label in enumerate(labels):
        masks[label] = masks.get(label, np.zeros(index.shape, dtype=bool)) | (index == i)
    return masks


def make_phantom(spec: PhantomSpec) -> PropertyMap:
    """
    Rasteriza la especificación en un PropertyMap.

    Args:
        spec (PhantomSpec): dimensiones y figuras.

    Returns:
        PropertyMap: fondo con los valores de `spec.background`, figuras en orden.
    """
    nx, ny, nz = spec.dims
    index, _ = phantom_labels(spec)
    table = np.array([[spec.background["pd"], spec.background["t1"], spec.background["t2"]]] +
                     [[s.pd, s.t1, s.t2] for s in spec.shapes], dtype=np.float64)
    values = table[index + 1]  # (nz, ny, nx, 3)
    logger.debug("Fantoma rasterizado: %s con %d figuras", spec.dims, len(spec.shapes))
    return PropertyMap(spec.dims, PROPERTY_CHANNELS, np.moveaxis(values, -1, 0))


# =============================================================================
# Histogramas
# =============================================================================
def property_histogram(props: PropertyMap, channel: str = "T1", bins: int = 50, mask_pd_min: float = 0.0,
                       clip_percentile: Optional[float] = None, mask: Optional[np.ndarray] = None) -> pd.DataFrame:
    """
    Histograma de un canal sobre los voxeles con PD ≥ mask_pd_min.

    Args:
        props (PropertyMap): mapa de propiedades.
        channel (str): 'PD', 'T1' o 'T2'.
        bins (int): número de intervalos (≥ 1).
        mask_pd_min (float): umbral de PD para excluir el fondo.
        clip_percentile (float, optional): si se da (p. ej. 0.95), el rango se recorta a ese percentil.
        mask (np.ndarray, optional): máscara adicional (nz, ny, nx).

    Returns:
        pd.DataFrame: columnas bin_center y count.
    """
    if bins < 1:
        raise ValueError("bins debe ser ≥ 1.")
    selected = props.pd >= mask_pd_min
    if mask is not None:
        selected = selected & np.asarray(mask, dtype=bool)
    values = props.channel(channel)[selected]
    if values.size == 0:
        raise ValueError("La máscara de voxeles está vacía.")
    if clip_percentile is not None:
        upper = float(np.quantile(values, clip_percentile, method="linear"))
        values = values[values <= upper]
    counts, edges = np.histogram(values, bins=bins)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return pd.DataFrame({"bin_center": centers, "count": counts.astype(np.int64)})
