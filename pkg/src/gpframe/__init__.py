"""Gaussian-process regression with composable kernels, scaling paths and a pipeline CLI."""

__version__ = "0.1.0"
