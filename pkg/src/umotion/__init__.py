"""Learned point-cloud video coding with hierarchical motion (numpy + numba)."""

__version__ = "0.1.0"
