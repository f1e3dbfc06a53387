"""Selective-kernel attention U-net for lesion segmentation, desk-scale."""

__version__ = "0.1.0"
