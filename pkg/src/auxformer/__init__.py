"""Mask-aware spatial-temporal transformer for skeleton motion prediction with auxiliary tasks."""

__version__ = "0.1.0"
