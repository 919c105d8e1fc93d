"""Boundary-integral Stokes solver for rigid spheroids with QBX and Ewald summation."""

__version__ = "0.1.0"
