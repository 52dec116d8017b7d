"""Erasable reinforcement learning for search-augmented multi-hop reasoning."""

__version__ = "0.1.0"
