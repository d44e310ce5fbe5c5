"""Desk-scale CT metal artifact reduction pipeline."""

__version__ = "0.1.0"
