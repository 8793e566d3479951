"""Embedding-table compression for recommenders via bipartite graph clustering."""

__version__ = "0.1.0"
