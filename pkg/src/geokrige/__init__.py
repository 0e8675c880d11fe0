"""Gaussian-process interpolation when observation locations are uncertain."""

__version__ = "0.1.0"
