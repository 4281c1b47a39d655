"""Iterative reasoning as energy minimisation."""

__version__ = "0.1.0"
