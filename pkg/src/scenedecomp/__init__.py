"""Unsupervised scene decomposition with iterative amortized inference."""

__version__ = "0.1.0"
