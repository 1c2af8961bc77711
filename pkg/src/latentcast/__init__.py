"""Latent-space forecasting of key atmospheric variables."""

__version__ = "0.1.0"
