"""Desk-scale end-to-end spoken language understanding toolkit."""

__version__ = "0.1.0"
