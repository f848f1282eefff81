"""Neural bundle-map surrogate for coupled multiphysics cell simulations."""

__version__ = "0.1.0"
