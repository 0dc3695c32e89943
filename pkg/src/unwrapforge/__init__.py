"""Synthetic InSAR interferograms, diffusion-refined phase unwrapping and tiled inference."""

__version__ = "0.1.0"
