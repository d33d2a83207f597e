"""Synthetic crowd counting: scene generation, density regression, adaptation."""
__version__ = "0.1.0"
