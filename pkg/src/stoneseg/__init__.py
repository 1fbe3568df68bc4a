"""Kidney-stone video segmentation toolkit: preprocessing, annotation
rasterization, a numpy segmentation network, training, synthetic scenes,
and a real-time annotation pipeline."""

__version__ = "0.1.0"
