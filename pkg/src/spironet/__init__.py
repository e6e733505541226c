"""Vessel segmentation with dual spatial/frequency encoders on a numpy autodiff core."""

__version__ = "0.1.0"
