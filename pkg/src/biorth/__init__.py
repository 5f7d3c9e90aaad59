"""Dynamically bi-orthogonal field equations for uncertainty propagation and Bayesian calibration."""

__version__ = "0.1.0"
