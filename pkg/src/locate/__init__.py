"""Temporal action localization on 3D skeleton motion."""

__version__ = "0.1.0"
