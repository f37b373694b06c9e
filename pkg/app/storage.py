# app/storage.py
"""
Lectura y escritura de los formatos binarios del paquete

Todos comparten la misma estructura: una línea de encabezado JSON en UTF-8
terminada en '\\n' seguida de flotantes de 32 bits little-endian.

    .pvol  {"magic":"PVOL1","dims":[nx,ny,nz],"channels":k,"channel_names":[...],"dtype":"f32le"}
    .gauss {"magic":"GAUS1","dim":d,"dtype":"f32le"}              d medias y luego d varianzas
    .latn  {"magic":"LATN1","dim":d,"count":n,"dtype":"f32le"}    n·d valores
    .mlp   {"magic":"MLP1","widths":[...],"activation":...,"cond_dim":c,"seed":s,"groups":g,
           "schedule":{"timesteps":T,"beta_start":b0,"beta_end":b1},"dtype":"f32le"}  (schedule opcional)

Los lectores rechazan magic o dtype desconocidos y cargas útiles truncadas.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np

from app.core import PropertyMap, Volume
from app.fusion import VARIANCE_FLOOR, GaussianFactor
from app.nn import MlpModel

logger = logging.getLogger(__name__)

DTYPE = "f32le"
PathLike = Union[str, Path]

PVOL_MAGIC = "PVOL1"
GAUSS_MAGIC = "GAUS1"
LATENT_MAGIC = "LATN1"
MLP_MAGIC = "MLP1"
SCHEDULE_KEYS = ("timesteps", "beta_start", "beta_end")


# -----------------------------------------------------------------------------
# Encabezado + carga útil
# -----------------------------------------------------------------------------
def _write(path: PathLike, header: dict, values: np.ndarray) -> Path:
    path = Path(path)
    line = json.dumps(header, separators=(",", ":")) + "\n"
    payload = np.ascontiguousarray(values, dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(line.encode("utf-8"))
        f.write(payload)
    logger.debug("Escrito %s (%s, %d bytes de datos)", path, header.get("magic"), len(payload))
    return path


def _read(path: PathLike, magic: str) -> Tuple[dict, np.ndarray]:
    with open(path, "rb") as f:
        line = f.readline()
        payload = f.read()
    try:
        header = json.loads(line.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ValueError(f"{path}: encabezado JSON ilegible ({e})") from e
    if not isinstance(header, dict) or header.get("magic") != magic:
        raise ValueError(f"{path}: magic desconocido {header.get('magic') if isinstance(header, dict) else None!r}, "
                         f"se esperaba {magic}.")
    if header.get("dtype", DTYPE) != DTYPE:
        raise ValueError(f"{path}: dtype no soportado {header.get('dtype')!r}.")
    if len(payload) % 4:
        raise ValueError(f"{path}: carga útil truncada.")
    return header, np.frombuffer(payload, dtype="<f4").astype(np.float64)


def _expect(path: PathLike, values: np.ndarray, count: int) -> None:
    if values.size != count:
        raise ValueError(f"{path}: se esperaban {count} valores, hay {values.size}.")


# =============================================================================
# .pvol
# =============================================================================
def write_volume(path: PathLike, volume: Volume) -> Path:
    header = {"magic": PVOL_MAGIC, "dims": list(volume.dims), "channels": volume.channels,
              "channel_names": list(volume.channel_names), "dtype": DTYPE}
    return _write(path, header, volume.flat())


def read_volume(path: PathLike) -> Volume:
    header, values = _read(path, PVOL_MAGIC)
    dims = [int(d) for d in header["dims"]]
    names = list(header.get("channel_names") or [f"c{i}" for i in range(int(header["channels"]))])
    if len(names) != int(header["channels"]):
        raise ValueError(f"{path}: channel_names no coincide con channels.")
    _expect(path, values, int(np.prod(dims)) * len(names))
    return Volume.from_flat(dims, names, values)


def read_property_map(path: PathLike) -> PropertyMap:
    return PropertyMap.from_volume(read_volume(path))


# =============================================================================
# .gauss
# =============================================================================
def write_gaussian(path: PathLike, factor: GaussianFactor) -> Path:
    header = {"magic": GAUSS_MAGIC, "dim": factor.dim, "dtype": DTYPE}
    return _write(path, header, np.concatenate([factor.mean, np.maximum(factor.variance, VARIANCE_FLOOR)]))


def read_gaussian(path: PathLike) -> GaussianFactor:
    header, values = _read(path, GAUSS_MAGIC)
    dim = int(header["dim"])
    _expect(path, values, 2 * dim)
    return GaussianFactor(values[:dim], np.maximum(values[dim:], VARIANCE_FLOOR))


# =============================================================================
# .latn
# =============================================================================
def write_latents(path: PathLike, latents: np.ndarray) -> Path:
    latents = np.atleast_2d(np.asarray(latents, dtype=np.float64))
    header = {"magic": LATENT_MAGIC, "dim": latents.shape[1], "count": latents.shape[0], "dtype": DTYPE}
    return _write(path, header, latents.ravel())


def read_latents(path: PathLike) -> np.ndarray:
    header, values = _read(path, LATENT_MAGIC)
    dim, count = int(header["dim"]), int(header["count"])
    _expect(path, values, dim * count)
    return values.reshape(count, dim)


# =============================================================================
# .mlp
# =============================================================================
def write_mlp(path: PathLike, model: MlpModel, schedule: Optional[dict] = None) -> Path:
    """
    Guarda el modelo; `schedule` ({timesteps, beta_start, beta_end}) queda en el
    encabezado para que el muestreo use el calendario del entrenamiento.
    """
    header = {"magic": MLP_MAGIC, "widths": list(model.widths), "activation": model.activation,
              "cond_dim": model.cond_dim, "seed": model.seed, "groups": model.groups, "dtype": DTYPE}
    if schedule is not None:
        header["schedule"] = {key: schedule[key] for key in SCHEDULE_KEYS}
    return _write(path, header, np.concatenate([p.ravel() for p in model.parameters()]))


def read_mlp_schedule(path: PathLike) -> Optional[dict]:
    """Calendario registrado en el encabezado .mlp, o None si el archivo no lo trae."""
    header, _ = _read(path, MLP_MAGIC)
    schedule = header.get("schedule")
    if schedule is None:
        return None
    if not isinstance(schedule, dict) or set(schedule) != set(SCHEDULE_KEYS):
        raise ValueError(f"{path}: calendario mal formado en el encabezado ({schedule!r}).")
    return {"timesteps": int(schedule["timesteps"]), "beta_start": float(schedule["beta_start"]),
            "beta_end": float(schedule["beta_end"])}


def read_mlp(path: PathLike) -> MlpModel:
    header, values = _read(path, MLP_MAGIC)
    widths = tuple(int(w) for w in header["widths"])
    cond_dim = int(header.get("cond_dim", 0))
    shapes = []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        shapes += [(fan_out, fan_in), (fan_out,)]
    if cond_dim:
        hidden = len(widths) - 2
        shapes += [(2 * hidden, cond_dim), (2 * hidden,)]
    _expect(path, values, sum(int(np.prod(s)) for s in shapes))
    params, offset = [], 0
    for shape in shapes:
        size = int(np.prod(shape))
        params.append(values[offset:offset + size].reshape(shape))
        offset += size
    n_layers = len(widths) - 1
    layers = params[:2 * n_layers]
    head = params[2 * n_layers:]
    return MlpModel(widths, tuple(layers[0::2]), tuple(layers[1::2]), header.get("activation", "silu"),
                    cond_dim, int(header.get("groups", 1)), int(header.get("seed", 0)),
                    head[0] if head else None, head[1] if head else None)
