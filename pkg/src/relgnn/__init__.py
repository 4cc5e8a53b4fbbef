"""Supervised learning on relational databases via graph neural networks."""

__version__ = "0.1.0"
