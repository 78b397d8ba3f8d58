"""Numerical construction of curvature-product-preserving G-deformations."""

__version__ = "0.1.0"
