# app/__init__.py
"""Síntesis de contrastes de RM guiada por física y mapeo cuantitativo."""

__version__ = "0.1.0"
