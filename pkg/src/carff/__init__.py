"""Belief forecasting over a pose-conditional latent space with a latent-conditioned radiance field."""

__version__ = "0.1.0"
