"""Dynamics-constrained autoencoder with a learned overdamped Langevin prior."""

__version__ = "0.1.0"
