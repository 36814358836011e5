"""Learned pseudorange corrections through a differentiable moving-horizon estimator."""

__version__ = "0.1.0"
