"""Cone embeddings for first-order logical queries over knowledge graphs."""

__version__ = "0.1.0"
