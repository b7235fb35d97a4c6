"""Localized bundle adjustment for multi-strip aerial imagery with patch-based tracking."""

__version__ = "0.1.0"
