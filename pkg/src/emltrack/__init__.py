"""Engagement-in-motor-learning classification from wearable sensor streams."""

__version__ = "0.1.0"
