"""Differentiable retrieval of mutually compatible patches from a feature bank."""

__version__ = "0.1.0"
