"""Stationary Kolmogorov equations with rough drift: solvers, changes of variables and diagnostics."""

__version__ = "0.1.0"
