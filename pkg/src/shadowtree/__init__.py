"""Utility maximization under proportional transaction costs on finite scenario trees, with shadow prices."""

__version__ = "0.1.0"
