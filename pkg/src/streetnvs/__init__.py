"""Depth-guided generalizable street-scene novel view synthesis."""

__version__ = "0.1.0"
