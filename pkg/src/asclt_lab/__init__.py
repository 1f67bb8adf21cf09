"""Numerical laboratory for almost-sure central limit behaviour of
normalized Hermite-type functionals of stationary Gaussian sequences."""

__version__ = "0.1.0"
