"""Coordinate architecture search for small Transformer language models."""

__version__ = "0.1.0"
