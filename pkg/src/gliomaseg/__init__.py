"""Ensemble 3D U-Net brain tumor segmentation and radiomic survival regression."""

__version__ = "0.1.0"
