"""Numerical weak KAM and Aubry-Mather computations for control-affine
systems on the torus."""

__version__ = "0.1.0"
