"""Hierarchical generator with a diffusion-learned EBM prior on the
base-noise space."""

__version__ = "0.1.0"
