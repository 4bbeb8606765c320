"""Sparse feature sampling with learned interpolation for convolutional networks."""

__version__ = "0.1.0"
