"""Gaussian free fields and random interlacements on cable systems."""

__version__ = "0.1.0"
