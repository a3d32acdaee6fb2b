"""Anisotropic quasi-norm geometry and matrix Muckenhoupt weight experiments."""

__version__ = "0.1.0"
