"""Compressed vertical federated learning simulator with bound diagnostics."""

__version__ = "0.1.0"
