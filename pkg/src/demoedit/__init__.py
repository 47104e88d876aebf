"""Spatial augmentation of multi-view robot demonstrations."""

__version__ = "0.1.0"
