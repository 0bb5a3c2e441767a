"""Hierarchical part/object/context appearance tokens with global association for multi-object tracking."""

__version__ = "0.1.0"
