"""Clustering algorithms."""

from ._kmeans import KMeans, k_means

__all__ = ["KMeans", "k_means"]
