# app/main.py
"""
Punto de entrada del proceso: variables de entorno, logging y despacho a la CLI.

    python -m app.main <subcomando> [opciones]
"""

import logging
import logging.config
import os
import sys
from pathlib import Path

import yaml
from dotenv import load_dotenv

from app import cli
from app.utils import DEFAULT_LOGGING_PATH, ENV_LOG_LEVEL, ENV_LOGGING_CONFIG

logger = logging.getLogger("app")


def setup_logging() -> logging.Logger:
    """
    Configuración básica de logging (fallback) y, si existe, la configuración
    detallada de config/logging_config.yaml (o MRISYNTH_LOGGING_CONFIG).
    """
    level = os.getenv(ENV_LOG_LEVEL, "INFO").upper()
    logging.basicConfig(level=level, format="%(asctime)s - %(levelname)s - %(message)s", stream=sys.stderr)
    log = logging.getLogger("app")

    config_path = Path(os.getenv(ENV_LOGGING_CONFIG) or DEFAULT_LOGGING_PATH)
    if config_path.exists():
        try:
            with open(config_path, "r", encoding="utf-8") as f:
                logging_config = yaml.safe_load(f)
            logging.config.dictConfig(logging_config)
            log = logging.getLogger("app")
            if os.getenv(ENV_LOG_LEVEL):
                for name in logging_config.get("loggers", {}):
                    logging.getLogger(name).setLevel(level)
            log.debug("Configuración detallada de logging cargada de %s", config_path)
        except Exception as e:
            log.warning(f"No se pudo cargar la configuración detallada de logging: {e}")
    return log


def main(argv=None) -> int:
    load_dotenv()
    setup_logging()
    return cli.run(argv)


if __name__ == "__main__":
    sys.exit(main())
