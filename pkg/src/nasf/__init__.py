"""Distributed neural architecture search with a built-in micro training engine."""

__version__ = "0.1.0"
