"""Spectral and nonlinear stability toolkit for periodic traveling waves of
viscous conservation laws."""

__version__ = "0.1.0"
