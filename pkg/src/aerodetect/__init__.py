"""Detect latent-diffusion images from autoencoder reconstruction error."""

__version__ = "0.1.0"
