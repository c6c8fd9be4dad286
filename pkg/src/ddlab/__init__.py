"""Desk-scale laboratory for distorted Ornstein-Uhlenbeck diffusions."""

__version__ = "0.1.0"
