"""Dual-view (face + fingertip) photoplethysmography toolkit."""

__version__ = "0.1.0"
