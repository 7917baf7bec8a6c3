"""Simulate, align, package and quality-check multi-device small-group meeting sessions."""

__version__ = "0.1.0"
