"""Classifier-feedback semi-supervised object detection on synthetic scenes."""

__version__ = "0.1.0"
