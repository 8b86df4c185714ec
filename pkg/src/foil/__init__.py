"""Invariant learning for out-of-distribution time-series forecasting."""

__version__ = "0.1.0"
