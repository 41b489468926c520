"""Numerical verification toolkit for positivity estimates of kinetic equations with rough coefficients."""

__version__ = "0.1.0"
