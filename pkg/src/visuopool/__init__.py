"""Pooling heads for behaviour-cloned policies on a synthetic token world."""

__version__ = "0.1.0"
