"""Spatio-temporal popularity prediction on plain numpy."""

__version__ = "0.1.0"
