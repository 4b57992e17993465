"""Differentiable minimum-snap trajectory planning with a learned front end."""

__version__ = "0.1.0"
