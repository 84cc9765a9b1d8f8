"""Differentiable per-filter bit-width search for small quantized convnets."""

__version__ = "0.1.0"
