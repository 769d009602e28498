"""Hybrid spectral/Gaussian neural operator with sparse per-pixel routing."""

__version__ = "0.1.0"
