"""Separate-then-classify toolkit for bioacoustic recordings."""

__version__ = "0.1.0"
