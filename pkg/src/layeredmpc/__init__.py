"""Layered model-predictive control for hybrid systems with guard crossings."""

__version__ = "0.1.0"
