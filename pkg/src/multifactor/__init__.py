"""Multilinear (tensor) factor analysis: forward training and inverse projection."""
