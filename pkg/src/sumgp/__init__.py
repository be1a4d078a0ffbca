"""Structured Bayesian optimization for identifying object material parameters."""

__version__ = "0.1.0"
