"""Multi-stage metric embeddings for resource-constrained identity retrieval."""

__version__ = "0.1.0"
