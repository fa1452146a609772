"""Masked sentence model: hierarchical contrastive pretraining and retrieval."""

__version__ = "0.1.0"
