"""Sketched low-rank eigenbases of matrix-free operators and SLU uncertainty scores."""

__version__ = "0.1.0"
