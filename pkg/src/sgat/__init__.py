"""Sparse graph attention networks with L0-gated edges."""

__version__ = "0.1.0"
