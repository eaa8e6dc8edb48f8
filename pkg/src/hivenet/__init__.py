"""Multitask volumetric segmentation with hierarchical view-ensemble convolutions."""

__version__ = "0.1.0"
