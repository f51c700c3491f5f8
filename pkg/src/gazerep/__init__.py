"""Representation learning from gaze: attention pre-training and transfer evaluation."""

__version__ = "0.1.0"
