"""Dual-space pose-invariant embeddings for multi-view objects."""

__version__ = "0.1.0"
