"""Operator-learning surrogates for cardiac activation and repolarization maps."""

__version__ = "0.1.0"
