"""Animatable 3D Gaussian avatar engine."""

__version__ = "0.1.0"
