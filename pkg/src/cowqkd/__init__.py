"""Finite-key analysis, post-processing and simulation for coherent-one-way QKD."""

__version__ = "0.1.0"
