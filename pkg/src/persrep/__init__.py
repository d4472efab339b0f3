"""Personalized visual representations from a few real images plus synthetic data."""

__version__ = "0.1.0"
