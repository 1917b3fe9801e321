"""Estimation of surface-ozone model bias on latitude / longitude grids."""

__version__ = "0.1.0"
