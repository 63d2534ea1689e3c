"""Splitting Hamiltonian Monte Carlo sampling library and experiment runner."""

__version__ = "1.0.0"
