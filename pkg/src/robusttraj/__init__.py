"""Desk-scale laboratory for adversarially robust probabilistic trajectory prediction."""

__version__ = "0.1.0"
