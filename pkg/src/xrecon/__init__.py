"""Differentiable x-ray image reconstruction."""

__version__ = "0.1.0"
