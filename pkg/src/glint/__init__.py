"""Glint rendering with position-normal distributions over normal maps."""

__version__ = "0.1.0"
