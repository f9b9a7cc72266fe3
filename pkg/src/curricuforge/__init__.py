"""Reliability-driven curriculum selection of pseudo-labeled grounding data."""

__version__ = "0.1.0"
