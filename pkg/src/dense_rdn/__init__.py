"""Differentiable dense reaction-diffusion networks and gradient-based inverse design."""

__version__ = "0.1.0"
