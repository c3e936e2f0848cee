"""Transformer recommender with market embeddings for cross-market transfer."""

__version__ = "0.1.0"
