"""Spectral simulation and analysis of the 3D stochastic wave equation."""

__version__ = "0.1.0"
