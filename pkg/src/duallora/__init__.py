"""Continual learning with dual low-rank adapters on a miniature ViT."""

__version__ = "0.1.0"
