"""Retinal vessel segmentation with a deformable-convolution U-Net,
implemented from scratch on numpy."""

__version__ = "0.1.0"
