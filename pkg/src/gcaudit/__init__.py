"""Guideline-compliance critiquing over longitudinal patient records."""

__version__ = "0.1.0"
