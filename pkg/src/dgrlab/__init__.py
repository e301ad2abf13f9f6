"""Distortion graph representation learning for blind image quality assessment,
small enough to train and verify on a CPU in minutes."""

__version__ = "0.1.0"
