"""Coordinate-free neural routing toolkit over quasimetric instances."""

__version__ = "0.1.0"
