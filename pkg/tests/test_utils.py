# tests/test_utils.py
import json
import logging

import pytest

from app.core import SequenceKind
from app.logging_formatter import TimezoneFormatter, apply_logging_settings
from app.utils import (check_seconds, load_input_meta, load_reference_medians, parse_dims, parse_input_binding,
                       setup_app_config)


# =============================================================================
# Configuración
# =============================================================================
def test_default_config_file_is_loaded():
    config = setup_app_config()
    assert config["fit"]["prior_median_t1"] == 1.0
    assert config["diffusion"]["timesteps"] == 1000
    assert config["cli"]["max_seconds"] == 60.0
    assert config["phantom"]["brain2d"]["CSF"]["t1"] == 4.0


def test_explicit_config_merges_over_defaults(tmp_path):
    path = tmp_path / "custom.toml"
    path.write_text('[fit]\nprior_weight = 0.5\n[logging]\nlevel = "DEBUG"\n', encoding="utf-8")
    config = setup_app_config(path)
    assert config["fit"] == {"prior_weight": 0.5}
    assert config["logging"]["level"] == "DEBUG"
    assert config["logging"]["timezone"] == "UTC"
    assert config["preprocessing"]["percentile"] == 0.995


def test_config_errors(tmp_path):
    with pytest.raises(ValueError):
        setup_app_config(tmp_path / "missing.toml")
    broken = tmp_path / "broken.toml"
    broken.write_text("[fit\nprior_weight = ", encoding="utf-8")
    with pytest.raises(ValueError):
        setup_app_config(broken)


def test_environment_overrides(tmp_path, monkeypatch):
    path = tmp_path / "env.toml"
    path.write_text("[fit]\nmax_iterations = 7\n", encoding="utf-8")
    monkeypatch.setenv("MRISYNTH_CONFIG", str(path))
    monkeypatch.setenv("MRISYNTH_LOG_LEVEL", "debug")
    monkeypatch.setenv("MRISYNTH_TIMEZONE", "America/Mexico_City")
    config = setup_app_config()
    assert config["fit"]["max_iterations"] == 7
    assert config["logging"]["level"] == "DEBUG"
    assert config["logging"]["timezone"] == "America/Mexico_City"


def test_reference_medians(tmp_path):
    entries = load_reference_medians()
    assert {e["label"] for e in entries} == {"WM", "GM"}
    bad = tmp_path / "ref.json"
    bad.write_text(json.dumps([{"label": "WM", "t1": 0.8}]), encoding="utf-8")
    with pytest.raises(ValueError):
        load_reference_medians(bad)
    bad.write_text("[]", encoding="utf-8")
    with pytest.raises(ValueError):
        load_reference_medians(bad)


# =============================================================================
# Interpretación de argumentos
# =============================================================================
def test_parse_dims():
    assert parse_dims("224x160") == (224, 160, 1)
    assert parse_dims("64X64x4") == (64, 64, 4)
    for text in ("224", "0x10", "axb", "1x2x3x4"):
        with pytest.raises(ValueError):
            parse_dims(text)


def test_check_seconds():
    assert check_seconds("tr", 4.0, 60.0) == 4.0
    assert check_seconds("ti", None, 60.0) is None
    with pytest.raises(ValueError, match="ms"):
        check_seconds("tr", 4000.0, 60.0)


def test_parse_input_binding():
    path, params = parse_input_binding("/data/run:1/flair.pvol:flair,0.1,9,2.4")
    assert path == "/data/run:1/flair.pvol"
    assert params.sequence is SequenceKind.FLAIR
    assert (params.te, params.tr, params.ti) == (0.1, 9.0, 2.4)
    _, se = parse_input_binding("se.pvol:se,0.08,4")
    assert se.ti is None
    for text in ("se.pvol", ":se,0.08,4", "se.pvol:se,0.08", "se.pvol:se,a,4", "se.pvol:se,80,4000"):
        with pytest.raises(ValueError):
            parse_input_binding(text)


def test_load_input_meta_resolves_relative_paths(tmp_path):
    meta = tmp_path / "meta.json"
    meta.write_text(json.dumps([{"path": "a.pvol", "seq": "mprage", "te": 0.003, "tr": 2.3, "ti": 0.9}]),
                    encoding="utf-8")
    [(path, params)] = load_input_meta(meta)
    assert path == str(tmp_path / "a.pvol")
    assert params.sequence is SequenceKind.MPRAGE
    meta.write_text(json.dumps({"path": "a.pvol"}), encoding="utf-8")
    with pytest.raises(ValueError):
        load_input_meta(meta)


# =============================================================================
# Formateador con zona horaria
# =============================================================================
def _record():
    record = logging.LogRecord("app", logging.INFO, __file__, 1, "hola", None, None)
    record.created = 0.0
    return record


def test_timezone_formatter_uses_zone():
    utc = TimezoneFormatter("%(asctime)s %(message)s", datefmt="%Y-%m-%d %H:%M", tz="UTC")
    assert utc.format(_record()) == "1970-01-01 00:00 hola"
    mexico = TimezoneFormatter("%(asctime)s", datefmt="%Y-%m-%d %H:%M", tz="America/Mexico_City")
    assert mexico.format(_record()) == "1969-12-31 18:00"


def test_timezone_formatter_falls_back_to_utc(monkeypatch):
    monkeypatch.delenv("MRISYNTH_TIMEZONE", raising=False)
    assert TimezoneFormatter(tz="Mars/Olympus").tz.zone == "UTC"
    assert TimezoneFormatter().tz.zone == "UTC"
    monkeypatch.setenv("MRISYNTH_TIMEZONE", "Europe/Madrid")
    assert TimezoneFormatter().tz.zone == "Europe/Madrid"


def test_apply_logging_settings():
    handler = logging.StreamHandler()
    handler.setFormatter(TimezoneFormatter(tz="UTC"))
    log = logging.getLogger("mrisynth_test")
    log.addHandler(handler)
    try:
        assert apply_logging_settings({"level": "debug", "timezone": "Asia/Tokyo"}, "mrisynth_test") is log
        assert log.level == logging.DEBUG
        assert handler.formatter.tz.zone == "Asia/Tokyo"
        with pytest.raises(ValueError):
            apply_logging_settings({"level": "VERBOSE"}, "mrisynth_test")
    finally:
        log.removeHandler(handler)
