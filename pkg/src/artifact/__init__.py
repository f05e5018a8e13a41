"""Numerical laboratory for eigenvector statistics on regular graphs."""

__version__ = "0.1.0"
