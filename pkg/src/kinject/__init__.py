"""Frozen-decoder knowledge injection through per-layer hidden-state difference encoders."""

__version__ = "0.1.0"
