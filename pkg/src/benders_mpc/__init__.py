"""Warm-started Generalized Benders Decomposition for hybrid MPC."""

__version__ = "0.1.0"
