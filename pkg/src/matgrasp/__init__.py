"""Tactile re-grasping on a multi-fingered hand trained with soft clipped policy gradients."""

__version__ = "0.1.0"
