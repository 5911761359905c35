"""Gradient-based attention network for person re-identification."""

__version__ = "0.1.0"
