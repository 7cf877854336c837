"""Normalization-scheme testbed for window-attention image restoration models."""

__version__ = "0.1.0"
