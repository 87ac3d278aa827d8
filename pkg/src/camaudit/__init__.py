"""Conservativeness auditing of CAM-style saliency methods for segmentation networks."""

__version__ = "0.1.0"
