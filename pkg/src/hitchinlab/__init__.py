"""Numerical experiments on harmonic metrics for rank-2 Higgs bundles with
parabolic structure: weights, local models, a radial Hitchin solver, and
WKB-type transport estimates."""

__version__ = "0.1.0"
