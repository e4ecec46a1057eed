"""Latent-space energy-based generative replay for continual learning."""

__version__ = "0.1.0"
