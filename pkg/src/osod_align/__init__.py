"""Semantic alignment losses, centerness targets and open-set detection metrics."""

__version__ = "0.1.0"
