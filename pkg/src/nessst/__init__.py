"""Shi-Tomasi keypoints ranked by Monte-Carlo stability under perspective warps."""

__version__ = "0.1.0"
