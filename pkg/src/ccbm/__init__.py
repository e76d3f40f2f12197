"""Inverse obstacle reconstruction for advection-diffusion with complex boundary coupling."""

__version__ = "0.1.0"
