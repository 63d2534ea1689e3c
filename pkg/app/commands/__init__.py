# app/commands/__init__.py
"""Command-line handlers, one module per command group."""

from app.commands import compare, presets, run

__all__ = ["compare", "presets", "run"]
