"""Latent-diffusion low-shot object counting."""

__version__ = "0.1.0"
