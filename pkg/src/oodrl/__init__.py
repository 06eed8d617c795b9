"""Uncertainty-based out-of-distribution detection for deep Q-learning agents."""

__version__ = "0.1.0"
