"""Diffusion-based adversarial purification for tabular intrusion data."""

__version__ = "0.1.0"
