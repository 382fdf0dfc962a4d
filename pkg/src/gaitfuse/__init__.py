"""Silhouette + skeleton-heatmap gait recognition with attention-based fusion."""

__version__ = "0.1.0"
