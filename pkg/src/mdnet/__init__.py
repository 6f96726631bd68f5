"""Additive (multiplication-devoid) neural networks for gas-sensor time series."""

__version__ = "0.1.0"
