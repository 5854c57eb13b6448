"""Numerical laboratory for spectral diagnostics of 1D Schrodinger operators."""

__version__ = "0.1.0"
