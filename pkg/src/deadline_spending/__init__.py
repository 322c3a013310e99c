"""Optimal spending of a discrete resource at random opportunities before a deadline."""

__version__ = "0.1.0"
