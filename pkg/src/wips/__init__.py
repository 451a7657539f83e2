"""Diffusions interacting through time-varying inhomogeneous random graphs."""

__version__ = "0.1.0"
