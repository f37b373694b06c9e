# app/utils.py
"""
Módulo de utilidades

Contiene funciones para:
- Cargar la configuración de la aplicación (setup_app_config) desde config/config.toml,
  con variables de entorno (.env) que pueden sobrescribir rutas y nivel de log.
- Cargar las medianas de referencia para la validación de distribuciones.
- Interpretar dimensiones ("224x160") y enlaces de entrada "archivo:seq,te,tr[,ti]".
"""

import copy
import json
import logging
import os
from pathlib import Path
from typing import List, Optional, Tuple

import toml
from dotenv import load_dotenv

from app.core import AcquisitionParams

logger = logging.getLogger(__name__)

ROOT_DIR = Path(__file__).resolve().parent.parent
CONFIG_DIR = ROOT_DIR / "config"
DEFAULT_CONFIG_PATH = CONFIG_DIR / "config.toml"
DEFAULT_LOGGING_PATH = CONFIG_DIR / "logging_config.yaml"
DEFAULT_REFERENCE_PATH = CONFIG_DIR / "reference_medians.json"

ENV_CONFIG = "MRISYNTH_CONFIG"
ENV_LOGGING_CONFIG = "MRISYNTH_LOGGING_CONFIG"
ENV_LOG_LEVEL = "MRISYNTH_LOG_LEVEL"
ENV_TIMEZONE = "MRISYNTH_TIMEZONE"

# Valores usados cuando no existe config.toml
DEFAULT_CONFIG = {
    "general": {"project_name": "mrisynth", "version": "0.1.0"},
    "preprocessing": {"percentile": 0.995},
    "signal": {"gain": 1.0, "magnitude_mode": False},
    "fit": {},
    "phantom": {"brain2d": {}},
    "fusion": {"prior_expert": False},
    "diffusion": {},
    "metrics": {"ms_ssim": {}, "validation": {}},
    "cli": {"max_seconds": 60.0},
    "logging": {"level": "INFO", "timezone": "UTC"},
}


def _merge(base: dict, override: dict) -> dict:
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def setup_app_config(path: Optional[os.PathLike] = None) -> dict:
    """
    Carga la configuración de la aplicación.

    Orden de precedencia: argumento `path`, variable MRISYNTH_CONFIG, config/config.toml.
    Las secciones ausentes toman los valores de DEFAULT_CONFIG.

    Args:
        path (str, optional): ruta alternativa a un archivo TOML.

    Returns:
        dict: configuración completa por secciones.

    Raises:
        ValueError: si el archivo indicado explícitamente no existe o no es TOML válido.
    """
    load_dotenv()
    explicit = path or os.getenv(ENV_CONFIG)
    config_path = Path(explicit) if explicit else DEFAULT_CONFIG_PATH
    config = copy.deepcopy(DEFAULT_CONFIG)
    if config_path.exists():
        try:
            config = _merge(config, toml.load(config_path))
        except toml.TomlDecodeError as e:
            raise ValueError(f"Archivo de configuración inválido {config_path}: {e}") from e
        logger.debug("Configuración cargada de %s", config_path)
    elif explicit:
        raise ValueError(f"Archivo de configuración no encontrado: {config_path}")
    else:
        logger.warning("Archivo de configuración no encontrado; se usan valores por defecto.")

    if os.getenv(ENV_LOG_LEVEL):
        config["logging"]["level"] = os.getenv(ENV_LOG_LEVEL).upper()
    if os.getenv(ENV_TIMEZONE):
        config["logging"]["timezone"] = os.getenv(ENV_TIMEZONE)
    return config


def load_reference_medians(path: Optional[os.PathLike] = None) -> List[dict]:
    """
    Lee la lista [{"label", "t1", "t2"}, ...] de medianas de referencia (segundos).
    """
    path = Path(path) if path else DEFAULT_REFERENCE_PATH
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if isinstance(data, dict):
        data = data.get("reference", [])
    if not isinstance(data, list) or not data:
        raise ValueError(f"{path}: se esperaba una lista no vacía de medianas de referencia.")
    for entry in data:
        missing = {"label", "t1", "t2"} - set(entry)
        if missing:
            raise ValueError(f"{path}: entrada sin {sorted(missing)}: {entry}")
    return data


def parse_dims(text: str) -> Tuple[int, int, int]:
    """'224x160' → (224, 160, 1); '64x64x4' → (64, 64, 4)."""
    try:
        parts = [int(p) for p in str(text).lower().split("x")]
    except ValueError as e:
        raise ValueError(f"Dimensiones inválidas {text!r}; use NXxNY o NXxNYxNZ.") from e
    if len(parts) == 2:
        parts.append(1)
    if len(parts) != 3 or any(p <= 0 for p in parts):
        raise ValueError(f"Dimensiones inválidas {text!r}; use NXxNY o NXxNYxNZ.")
    return tuple(parts)


def check_seconds(name: str, value: Optional[float], max_seconds: float) -> Optional[float]:
    """Rechaza tiempos que parecen estar en milisegundos."""
    if value is not None and value > max_seconds:
        raise ValueError(f"{name}={value} excede {max_seconds} s; los tiempos se expresan en segundos, no en ms.")
    return value


def parse_input_binding(text: str, max_seconds: float = 60.0) -> Tuple[str, AcquisitionParams]:
    """
    Interpreta 'archivo.pvol:seq,te,tr[,ti]'.

    Returns:
        tuple: (ruta, AcquisitionParams)
    """
    path, sep, spec = str(text).rpartition(":")
    if not sep or not path:
        raise ValueError(f"Entrada inválida {text!r}; use archivo:seq,te,tr[,ti].")
    fields = [f.strip() for f in spec.split(",")]
    if len(fields) not in (3, 4):
        raise ValueError(f"Entrada inválida {text!r}; use archivo:seq,te,tr[,ti].")
    try:
        times = [float(f) for f in fields[1:]]
    except ValueError as e:
        raise ValueError(f"Tiempos no numéricos en {text!r}.") from e
    for name, value in zip(("te", "tr", "ti"), times):
        check_seconds(name, value, max_seconds)
    params = AcquisitionParams.from_dict({"seq": fields[0], "te": times[0], "tr": times[1],
                                          "ti": times[2] if len(times) == 3 else None})
    return path, params


def load_input_meta(path: os.PathLike, max_seconds: float = 60.0) -> List[Tuple[str, AcquisitionParams]]:
    """Lee [{"path", "seq", "te", "tr", "ti"}, ...]; las rutas relativas se resuelven junto al JSON."""
    path = Path(path)
    with open(path, "r", encoding="utf-8") as f:
        data = json.load(f)
    if not isinstance(data, list):
        raise ValueError(f"{path}: se esperaba una lista de entradas.")
    bindings = []
    for entry in data:
        for name in ("te", "tr", "ti"):
            check_seconds(name, entry.get(name), max_seconds)
        file_path = Path(entry["path"])
        if not file_path.is_absolute():
            file_path = path.parent / file_path
        bindings.append((str(file_path), AcquisitionParams.from_dict(entry)))
    return bindings
