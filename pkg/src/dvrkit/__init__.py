"""Differentiable volumetric rendering for implicit occupancy and texture fields."""

__version__ = "0.1.0"
