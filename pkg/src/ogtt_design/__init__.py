"""Bayesian design of measurement times for the oral glucose tolerance test."""

__version__ = "0.1.0"
