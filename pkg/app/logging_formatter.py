# app/logging_formatter.py
import datetime
import logging
import os

import pytz

DEFAULT_TIMEZONE = "UTC"


class TimezoneFormatter(logging.Formatter):
    """
    Formateador de logs que expresa asctime en una zona horaria IANA.

    La zona se toma del argumento `tz`, de MRISYNTH_TIMEZONE o, en su defecto, UTC.
    """
    def __init__(self, fmt=None, datefmt=None, style="%", tz=None):
        super().__init__(fmt=fmt, datefmt=datefmt, style=style)
        self.set_timezone(tz or os.getenv("MRISYNTH_TIMEZONE") or DEFAULT_TIMEZONE)

    def set_timezone(self, name: str) -> None:
        try:
            self.tz = pytz.timezone(name)
        except pytz.UnknownTimeZoneError:
            self.tz = pytz.timezone(DEFAULT_TIMEZONE)

    def converter(self, timestamp):
        dt = datetime.datetime.fromtimestamp(timestamp, self.tz)
        return dt.timetuple()


def apply_logging_settings(section: dict, logger_name: str = "app") -> logging.Logger:
    """
    Aplica la sección [logging] de la configuración: nivel del logger del paquete
    y zona horaria de los formateadores ya instalados.

    Raises:
        ValueError: Si el nivel no es un nombre de nivel de logging.
    """
    level = str(section.get("level", "INFO")).upper()
    if not isinstance(logging.getLevelName(level), int):
        raise ValueError(f"Nivel de logging desconocido: {level}")
    log = logging.getLogger(logger_name)
    log.setLevel(level)
    tz = section.get("timezone")
    if tz:
        for handler in log.handlers + logging.getLogger().handlers:
            if isinstance(handler.formatter, TimezoneFormatter):
                handler.formatter.set_timezone(tz)
    return log
