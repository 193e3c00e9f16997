"""Quantile-regression memory allocation for build jobs."""

__version__ = "0.1.0"
