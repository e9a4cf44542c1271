"""Desk-scale simulator for compressible conducting fluids carrying insulating rigid bodies."""

__version__ = "0.1.0"
