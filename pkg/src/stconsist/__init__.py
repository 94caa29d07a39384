"""Spatio-temporal consistency training for single-image segmentation."""

__version__ = "0.1.0"
