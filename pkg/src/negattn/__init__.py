"""Negative cross-attention for subject-personalised toy latent diffusion."""

__version__ = "0.1.0"
