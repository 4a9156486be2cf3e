"""Calibration benchmark for time-series simulation models."""

__version__ = "0.1.0"
