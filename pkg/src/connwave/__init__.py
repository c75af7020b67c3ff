"""Numerical laboratory for connection wave operators on product Lorentzian manifolds."""

__version__ = "0.1.0"
