"""Lagrangian invariant tori of quasi-periodically forced Hamiltonian systems."""

__version__ = "0.1.0"
