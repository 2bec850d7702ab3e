"""Stereo-proxy distillation for monocular depth at desk scale."""

__version__ = "0.1.0"
